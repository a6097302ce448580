// dtisr: command-line front end for the diffusion-MRI toolkit. Subcommands
// are pure functions of (inputs, config, seed); every output directory gets
// a manifest with the effective configuration, the seed and input content
// hashes so runs can be reproduced bit-for-bit.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dtisr/bias.hpp"
#include "dtisr/degrade.hpp"
#include "dtisr/gradients.hpp"
#include "dtisr/net.hpp"
#include "dtisr/nifti.hpp"
#include "dtisr/phantom.hpp"
#include "dtisr/shsample.hpp"
#include "dtisr/stats.hpp"
#include "dtisr/tensor.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dtisr;

namespace {

constexpr const char* kVersion = "1.0.0";

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitFormat = 3;
constexpr int kExitNumerical = 4;

std::string hash_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open input for hashing: " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(bytes.data(), bytes.size())));
    return buf;
}

void require_file(const std::string& path) {
    if (!fs::exists(path)) throw ArgumentError("input file does not exist: " + path);
}

void write_manifest(const fs::path& outdir, const std::string& subcommand, const json& config,
                    std::uint64_t seed, const std::vector<std::string>& inputs,
                    const json& extra = json::object()) {
    json manifest;
    manifest["tool"] = "dtisr";
    manifest["version"] = kVersion;
    manifest["subcommand"] = subcommand;
    manifest["seed"] = seed;
    manifest["config"] = config;
    json in = json::array();
    for (const auto& p : inputs) in.push_back({{"path", p}, {"fnv1a64", hash_file(p)}});
    manifest["inputs"] = in;
    if (!extra.empty()) manifest["results"] = extra;
    std::ofstream f(outdir / "manifest.json", std::ios::trunc);
    if (!f) throw IoError("cannot write manifest in " + outdir.string());
    f << manifest.dump(2) << "\n";
}

DwiDataset load_dwi(const std::string& dwi, const std::string& bvals, const std::string& bvecs) {
    require_file(dwi);
    require_file(bvals);
    require_file(bvecs);
    DwiDataset d;
    d.volume = read_nifti(dwi);
    d.gradients = parse_gradient_table(bvals, bvecs);
    d.validate();
    return d;
}

void save_dwi(const DwiDataset& d, const fs::path& outdir, const std::string& stem) {
    write_nifti(d.volume, (outdir / (stem + ".nii")).string());
    write_gradient_table(d.gradients, (outdir / (stem + ".bval")).string(),
                         (outdir / (stem + ".bvec")).string());
}

json section(const json& config, const std::string& name) {
    return config.contains(name) ? config.at(name) : json::object();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"diffusion MRI toolkit: tensor fitting, direction-dependent bias correction, "
                 "degradation simulation, spatio-angular superresolution and evaluation statistics"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand

    std::uint64_t seed = 0;
    int threads = 1;
    std::string config_path;
    app.add_option("--seed", seed, "global random seed");
    app.add_option("--threads", threads, "worker thread count");
    app.add_option("--config", config_path, "JSON config file; command-line flags win over file values");

    // pre-scan for --config so file values become flag defaults
    json file_config = json::object();
    for (int i = 1; i + 1 < argc; ++i) {
        if (std::string(argv[i]) == "--config") {
            std::ifstream f(argv[i + 1]);
            if (f) {
                file_config = json::parse(f, nullptr, false);
                if (file_config.is_discarded()) {
                    std::cerr << "error: cannot parse config JSON: " << argv[i + 1] << "\n";
                    return kExitFormat;
                }
            }
        }
    }

    std::function<void()> run;

    // ---------------------------------------------------------------- phantom
    auto* cmd_phantom = app.add_subcommand("phantom", "generate a synthetic ground-truth dataset");
    struct {
        std::string spec_path, out, scene = "single_bundle";
        std::vector<int> dims{56, 64, 52};
        double voxel = 3.5;
        double rician_sigma = 0.0;
        bool inject_bias = false;
    } ph;
    {
        const json c = section(file_config, "phantom");
        ph.scene = c.value("scene", ph.scene);
        ph.rician_sigma = c.value("rician_sigma", ph.rician_sigma);
        ph.inject_bias = c.value("inject_bias", ph.inject_bias);
    }
    cmd_phantom->add_option("--spec", ph.spec_path, "phantom spec JSON (overrides the scene flags)");
    cmd_phantom->add_option("--scene", ph.scene, "isotropic_sphere|single_bundle|crossing_bundles|curved_bundle");
    cmd_phantom->add_option("--size", ph.dims, "grid dimensions")->expected(3);
    cmd_phantom->add_option("--voxel", ph.voxel, "isotropic voxel size in mm");
    cmd_phantom->add_option("--rician-sigma", ph.rician_sigma, "Rician noise sigma in raw units");
    cmd_phantom->add_flag("--inject-bias", ph.inject_bias, "inject direction-dependent bias fields");
    cmd_phantom->add_option("--out", ph.out, "output directory")->required();
    cmd_phantom->callback([&] {
        run = [&] {
            PhantomSpec spec;
            std::vector<std::string> inputs;
            if (!ph.spec_path.empty()) {
                require_file(ph.spec_path);
                std::ifstream f(ph.spec_path);
                spec = json::parse(f).get<PhantomSpec>();
                inputs.push_back(ph.spec_path);
            } else {
                spec.grid = VolumeGrid::isotropic({ph.dims[0], ph.dims[1], ph.dims[2]}, ph.voxel);
                spec.scene = scene_from_name(ph.scene);
                spec.seed = seed;
            }
            fs::create_directories(ph.out);
            const PhantomField field = make_tensor_field(spec);
            const GradientTable table = ulf_gradient_table(700.0);

            std::unique_ptr<InjectedBias> bias;
            json bias_json;
            if (ph.inject_bias) {
                const DctBiasBasis basis(spec.grid);
                InjectedBiasSettings settings;
                for (auto i : table.dwi_indices()) settings.directions.push_back(table.bvecs[i]);
                Rng brng(seed ^ 0xb1a5f1e1d5ULL);
                bias = std::make_unique<InjectedBias>(make_injected_bias(basis, 9, brng, settings));
                for (const auto& row : bias->log_gamma.c) bias_json["log_gamma"].push_back(row);
                for (const auto& row : bias->log_upsilon.c) bias_json["log_upsilon"].push_back(row);
            }
            Rng rng(seed);
            const DwiDataset dwi =
                synthesize_dwi(field.tensors, table, field.s0, bias.get(), ph.rician_sigma, rng);
            const AtlasPriors atlas = make_synthetic_atlas(field.tensors, field.labels);

            const fs::path out(ph.out);
            save_dwi(dwi, out, "dwi");
            write_nifti(field.fa_truth, (out / "fa_truth.nii").string());
            write_nifti(field.v1_truth, (out / "v1_truth.nii").string());
            write_nifti(field.labels, (out / "labels.nii").string());
            write_nifti(field.s0, (out / "s0_truth.nii").string());
            write_nifti(field.tensors.to_volume(), (out / "tensors_truth.nii").string());
            save_atlas(atlas, (out / "atlas.nii").string(), (out / "atlas.json").string());
            if (bias) {
                std::ofstream f(out / "truth_bias.json", std::ios::trunc);
                f << bias_json.dump(2) << "\n";
            }
            write_manifest(out, "phantom", json(spec), seed, inputs,
                           {{"rician_sigma", ph.rician_sigma}, {"injected_bias", ph.inject_bias}});
        };
    });

    // -------------------------------------------------------------------- fit
    auto* cmd_fit = app.add_subcommand("fit", "log-linear tensor fit with FA/ADC/V1 maps");
    struct {
        std::string dwi, bvals, bvecs, mask, out;
    } fit;
    cmd_fit->add_option("--dwi", fit.dwi, "4D DWI NIfTI")->required();
    cmd_fit->add_option("--bvals", fit.bvals, "FSL bvals file")->required();
    cmd_fit->add_option("--bvecs", fit.bvecs, "FSL bvecs file")->required();
    cmd_fit->add_option("--mask", fit.mask, "optional mask NIfTI");
    cmd_fit->add_option("--out", fit.out, "output directory")->required();
    cmd_fit->callback([&] {
        run = [&] {
            const DwiDataset d = load_dwi(fit.dwi, fit.bvals, fit.bvecs);
            std::unique_ptr<Volume> mask;
            std::vector<std::string> inputs{fit.dwi, fit.bvals, fit.bvecs};
            if (!fit.mask.empty()) {
                require_file(fit.mask);
                mask = std::make_unique<Volume>(read_nifti(fit.mask));
                inputs.push_back(fit.mask);
            }
            const TensorMapResult r = fit_tensor_map(d, mask.get());
            fs::create_directories(fit.out);
            const fs::path out(fit.out);
            write_nifti(r.fa, (out / "fa.nii").string());
            write_nifti(r.adc, (out / "adc.nii").string());
            write_nifti(r.v1, (out / "v1.nii").string());
            write_nifti(r.tensors.to_volume(), (out / "tensor.nii").string());
            write_nifti(r.log_s0, (out / "log_s0.nii").string());
            write_manifest(out, "fit", json::object(), seed, inputs);
        };
    });

    // ----------------------------------------------------------------- sh-fit
    auto* cmd_shfit = app.add_subcommand("sh-fit", "fit the 7-channel SH sample for one shell");
    struct {
        std::string dwi, bvals, bvecs, out;
        double shell = 700.0;
        double tolerance = 50.0;
    } shf;
    {
        const json c = section(file_config, "sh-fit");
        shf.shell = c.value("shell", shf.shell);
        shf.tolerance = c.value("tolerance", shf.tolerance);
    }
    cmd_shfit->add_option("--dwi", shf.dwi)->required();
    cmd_shfit->add_option("--bvals", shf.bvals)->required();
    cmd_shfit->add_option("--bvecs", shf.bvecs)->required();
    cmd_shfit->add_option("--shell", shf.shell, "target shell b-value");
    cmd_shfit->add_option("--shell-tolerance", shf.tolerance, "shell grouping tolerance (s/mm^2)");
    cmd_shfit->add_option("--out", shf.out, "output directory")->required();
    cmd_shfit->callback([&] {
        run = [&] {
            const DwiDataset d = load_dwi(shf.dwi, shf.bvals, shf.bvecs);
            const ShSample sample = fit_sh_sample(d, shf.shell, shf.tolerance);
            fs::create_directories(shf.out);
            const fs::path out(shf.out);
            write_sh_sample(sample, (out / "shsample.nii").string());
            write_manifest(out, "sh-fit", {{"shell", shf.shell}, {"tolerance", shf.tolerance}}, seed,
                           {shf.dwi, shf.bvals, shf.bvecs},
                           {{"channel_order", ShSample::kChannelOrder}});
        };
    });

    // ----------------------------------------------------------- bias-correct
    auto* cmd_bias = app.add_subcommand("bias-correct",
                                        "direction-dependent Bayesian bias field estimation and removal");
    struct {
        std::string dwi, bvals, bvecs, atlas, out;
        CorrectionConfig cfg;
    } bc;
    {
        const json c = section(file_config, "bias-correct");
        bc.cfg.lambda_c = c.value("lambda_c", bc.cfg.lambda_c);
        bc.cfg.lambda_gm = c.value("lambda_gm", bc.cfg.lambda_gm);
        bc.cfg.adam.steps = c.value("adam_steps", bc.cfg.adam.steps);
        bc.cfg.adam.learning_rate = c.value("adam_lr", bc.cfg.adam.learning_rate);
        bc.cfg.lbfgs.max_iterations = c.value("lbfgs_iterations", bc.cfg.lbfgs.max_iterations);
        bc.cfg.lbfgs.history = c.value("lbfgs_history", bc.cfg.lbfgs.history);
        bc.cfg.lbfgs.gradient_tolerance = c.value("lbfgs_tolerance", bc.cfg.lbfgs.gradient_tolerance);
    }
    cmd_bias->add_option("--dwi", bc.dwi)->required();
    cmd_bias->add_option("--bvals", bc.bvals)->required();
    cmd_bias->add_option("--bvecs", bc.bvecs)->required();
    cmd_bias->add_option("--atlas", bc.atlas, "atlas priors bundle NIfTI")->required();
    cmd_bias->add_option("--out", bc.out)->required();
    cmd_bias->add_option("--lambda-c", bc.cfg.lambda_c, "coefficient magnitude weight");
    cmd_bias->add_option("--lambda-gm", bc.cfg.lambda_gm, "gray-matter FA^2 weight");
    cmd_bias->add_option("--adam-steps", bc.cfg.adam.steps);
    cmd_bias->add_option("--adam-lr", bc.cfg.adam.learning_rate);
    cmd_bias->add_option("--lbfgs-iterations", bc.cfg.lbfgs.max_iterations);
    cmd_bias->callback([&] {
        run = [&] {
            const DwiDataset d = load_dwi(bc.dwi, bc.bvals, bc.bvecs);
            require_file(bc.atlas);
            const AtlasPriors atlas = load_atlas(bc.atlas);
            const BiasPipelineResult r = bias_correct_pipeline(d, atlas, bc.cfg);
            fs::create_directories(bc.out);
            const fs::path out(bc.out);
            save_dwi(r.corrected, out, "corrected");
            write_nifti(r.lowb_field, (out / "lowb_field.nii").string());
            write_nifti(r.direction_fields, (out / "direction_fields.nii").string(),
                        "exp(zeta_i) per b>0 direction");
            json coeffs;
            for (const auto& row : r.coefficients.c) coeffs["directions"].push_back(row);
            coeffs["common_mode"] = r.optimization.common_mode;
            coeffs["lowb_dct"] = r.lowb_em.coefficients;
            std::ofstream cf(out / "coefficients.json", std::ios::trunc);
            cf << coeffs.dump(2) << "\n";
            const json cfg_echo = {{"lambda_c", bc.cfg.lambda_c},
                                   {"lambda_gm", bc.cfg.lambda_gm},
                                   {"adam_steps", bc.cfg.adam.steps},
                                   {"adam_lr", bc.cfg.adam.learning_rate},
                                   {"lbfgs_iterations", bc.cfg.lbfgs.max_iterations}};
            write_manifest(out, "bias-correct", cfg_echo, seed, {bc.dwi, bc.bvals, bc.bvecs, bc.atlas},
                           {{"initial_objective", r.optimization.initial_objective},
                            {"adam_handoff_objective", r.optimization.adam_handoff_objective},
                            {"final_objective", r.optimization.final_objective},
                            {"lbfgs_converged", r.optimization.lbfgs_converged},
                            {"line_search_warning", r.optimization.line_search_warning},
                            {"em_iterations", r.lowb_em.iterations},
                            {"warnings", r.lowb_em.warnings}});
        };
    });

    // ---------------------------------------------------------------- degrade
    auto* cmd_degrade = app.add_subcommand("degrade", "ULF-style degradation protocol");
    struct {
        std::string dwi, bvals, bvecs, out;
        UlfProtocolSettings settings;
    } dg;
    {
        const json c = section(file_config, "degrade");
        dg.settings.target_resolution_mm = c.value("resolution_mm", dg.settings.target_resolution_mm);
        dg.settings.target_directions = c.value("directions", dg.settings.target_directions);
        dg.settings.rician_sigma = c.value("rician_sigma", dg.settings.rician_sigma);
    }
    cmd_degrade->add_option("--dwi", dg.dwi)->required();
    cmd_degrade->add_option("--bvals", dg.bvals)->required();
    cmd_degrade->add_option("--bvecs", dg.bvecs)->required();
    cmd_degrade->add_option("--out", dg.out)->required();
    cmd_degrade->add_option("--resolution", dg.settings.target_resolution_mm, "target isotropic mm");
    cmd_degrade->add_option("--directions", dg.settings.target_directions, "retained b>0 directions");
    cmd_degrade->add_option("--rician-sigma", dg.settings.rician_sigma, "Rician noise sigma");
    cmd_degrade->callback([&] {
        run = [&] {
            const DwiDataset d = load_dwi(dg.dwi, dg.bvals, dg.bvecs);
            Rng rng(seed);
            const DwiDataset degraded = ulf_degrade_protocol(d, rng, dg.settings);
            fs::create_directories(dg.out);
            const fs::path out(dg.out);
            save_dwi(degraded, out, "degraded");
            write_manifest(out, "degrade",
                           {{"resolution_mm", dg.settings.target_resolution_mm},
                            {"directions", dg.settings.target_directions},
                            {"rician_sigma", dg.settings.rician_sigma}},
                           seed, {dg.dwi, dg.bvals, dg.bvecs});
        };
    });

    // --------------------------------------------------------- augment-preview
    auto* cmd_aug = app.add_subcommand("augment-preview", "apply the train-time augmentation chain once");
    struct {
        std::string in, out;
        bool with_deform = false;
        AugmentConfig cfg;
    } ap;
    if (file_config.contains("augment-preview")) ap.cfg = file_config.at("augment-preview").get<AugmentConfig>();
    cmd_aug->add_option("--in", ap.in, "input 7-channel SH sample NIfTI")->required();
    cmd_aug->add_option("--out", ap.out)->required();
    cmd_aug->add_option("--crop", ap.cfg.crop_size, "crop size");
    cmd_aug->add_flag("--deform", ap.with_deform, "include the patch deformation step");
    cmd_aug->callback([&] {
        run = [&] {
            require_file(ap.in);
            ShSample sample = read_sh_sample(ap.in);
            for (int a = 0; a < 3; ++a)
                ap.cfg.crop_size[std::size_t(a)] =
                    std::min(ap.cfg.crop_size[std::size_t(a)], sample.grid().dims[std::size_t(a)]);
            Rng rng(seed);
            ShSample out_sample = sample;
            if (ap.with_deform) out_sample = deform_patch(out_sample, ap.cfg, rng);
            out_sample = sh_drift(out_sample, ap.cfg, rng);
            out_sample = angular_subsample(out_sample, ap.cfg, rng);
            out_sample = geometric_degrade(out_sample, ap.cfg, rng);
            fs::create_directories(ap.out);
            const fs::path out(ap.out);
            write_sh_sample(out_sample, (out / "augmented.nii").string());
            write_manifest(out, "augment-preview", json(ap.cfg), seed, {ap.in});
        };
    });

    // ------------------------------------------------------------------ train
    auto* cmd_train = app.add_subcommand("train", "train the superresolution network");
    struct {
        std::vector<std::string> data;
        std::string out;
        TrainConfig cfg;
        MiniUNetConfig net;
    } tr;
    if (file_config.contains("train")) tr.cfg = file_config.at("train").get<TrainConfig>();
    if (file_config.contains("network")) tr.net = file_config.at("network").get<MiniUNetConfig>();
    cmd_train->add_option("--data", tr.data, "SH sample NIfTI files")->required()->expected(-1);
    cmd_train->add_option("--out", tr.out)->required();
    cmd_train->add_option("--epochs", tr.cfg.epochs);
    cmd_train->add_option("--iterations", tr.cfg.iterations_per_epoch, "iterations per epoch");
    cmd_train->add_option("--batch", tr.cfg.batch_size);
    cmd_train->add_option("--lr", tr.cfg.lr_base, "base learning rate");
    cmd_train->add_option("--warmup-epochs", tr.cfg.warmup_epochs);
    cmd_train->add_option("--levels", tr.net.levels);
    cmd_train->add_option("--features", tr.net.base_features);
    cmd_train->add_option("--patch", tr.cfg.augment.crop_size, "training patch size");
    cmd_train->callback([&] {
        run = [&] {
            std::vector<ShSample> samples;
            for (const auto& p : tr.data) {
                require_file(p);
                samples.push_back(read_sh_sample(p));
            }
            tr.cfg.seed = seed;
            SrModel model = SrModel::create(tr.net, seed);
            const TrainResult result = train(samples, model, tr.cfg);
            fs::create_directories(tr.out);
            const fs::path out(tr.out);
            save_checkpoint(model, tr.cfg.loss, (out / "checkpoint.bin").string());
            write_loss_csv(result, (out / "loss.csv").string());
            json cfg_echo;
            cfg_echo["train"] = tr.cfg;
            cfg_echo["network"] = tr.net;
            write_manifest(out, "train", cfg_echo, seed, tr.data,
                           {{"iterations", result.history.size()},
                            {"aborted_on_nan", result.aborted_on_nan},
                            {"final_loss", result.history.empty() ? 0.0 : result.history.back().terms.total}});
        };
    });

    // ----------------------------------------------------------- superresolve
    auto* cmd_sr = app.add_subcommand("superresolve", "run the trained network on an SH sample or DWI");
    struct {
        std::string checkpoint, in, dwi, bvals, bvecs, out;
        double shell = 700.0;
        double factor = 2.0;
        double target_voxel = 0.0;
    } sr;
    {
        const json c = section(file_config, "superresolve");
        sr.factor = c.value("factor", sr.factor);
        sr.target_voxel = c.value("target_voxel", sr.target_voxel);
        sr.shell = c.value("shell", sr.shell);
    }
    cmd_sr->add_option("--checkpoint", sr.checkpoint)->required();
    cmd_sr->add_option("--in", sr.in, "input SH sample NIfTI");
    cmd_sr->add_option("--dwi", sr.dwi, "raw DWI alternative to --in");
    cmd_sr->add_option("--bvals", sr.bvals);
    cmd_sr->add_option("--bvecs", sr.bvecs);
    cmd_sr->add_option("--shell", sr.shell, "shell used when fitting from raw DWI");
    cmd_sr->add_option("--factor", sr.factor, "upsampling factor (ignored when --target-voxel given)");
    cmd_sr->add_option("--target-voxel", sr.target_voxel, "target isotropic voxel size in mm");
    cmd_sr->add_option("--out", sr.out)->required();
    cmd_sr->callback([&] {
        run = [&] {
            require_file(sr.checkpoint);
            const LoadedCheckpoint ck = load_checkpoint(sr.checkpoint);
            ShSample input;
            std::vector<std::string> inputs{sr.checkpoint};
            if (!sr.in.empty()) {
                require_file(sr.in);
                input = read_sh_sample(sr.in);
                inputs.push_back(sr.in);
            } else if (!sr.dwi.empty()) {
                const DwiDataset d = load_dwi(sr.dwi, sr.bvals, sr.bvecs);
                input = fit_sh_sample(d, sr.shell);
                inputs.push_back(sr.dwi);
                inputs.push_back(sr.bvals);
                inputs.push_back(sr.bvecs);
            } else {
                throw ArgumentError("superresolve: provide --in or --dwi/--bvals/--bvecs");
            }
            std::array<double, 3> target_mm{};
            for (int a = 0; a < 3; ++a)
                target_mm[std::size_t(a)] = sr.target_voxel > 0.0
                                                ? sr.target_voxel
                                                : input.grid().voxel_size[std::size_t(a)] / sr.factor;
            const VolumeGrid target = grid_for_resolution(input.grid(), target_mm);
            const ShSample result = superresolve(ck.model, input, target);
            fs::create_directories(sr.out);
            const fs::path out(sr.out);
            write_sh_sample(result, (out / "superresolved.nii").string());
            write_manifest(out, "superresolve",
                           {{"factor", sr.factor}, {"target_voxel", sr.target_voxel}, {"shell", sr.shell}},
                           seed, inputs,
                           {{"output_dims", result.grid().dims}});
        };
    });

    // ---------------------------------------------------------------- metrics
    auto* cmd_metrics = app.add_subcommand("metrics", "field similarity metrics written as CSV");
    struct {
        std::string a, b, mask, out;
        int lncc_window = 10;
        bool v1 = false;
    } mt;
    {
        const json c = section(file_config, "metrics");
        mt.lncc_window = c.value("lncc_window", mt.lncc_window);
    }
    cmd_metrics->add_option("--a", mt.a, "first field")->required();
    cmd_metrics->add_option("--b", mt.b, "second field")->required();
    cmd_metrics->add_option("--mask", mt.mask, "optional mask NIfTI");
    cmd_metrics->add_option("--lncc-window", mt.lncc_window);
    cmd_metrics->add_flag("--v1", mt.v1, "treat inputs as 3-channel direction fields");
    cmd_metrics->add_option("--out", mt.out, "output CSV path")->required();
    cmd_metrics->callback([&] {
        run = [&] {
            require_file(mt.a);
            require_file(mt.b);
            const Volume a = read_nifti(mt.a);
            const Volume b = read_nifti(mt.b);
            std::unique_ptr<Volume> mask;
            if (!mt.mask.empty()) {
                require_file(mt.mask);
                mask = std::make_unique<Volume>(read_nifti(mt.mask));
            }
            std::ofstream csv(mt.out, std::ios::trunc);
            if (!csv) throw IoError("cannot write " + mt.out);
            csv << "metric,value,ci_low,ci_high,p_raw,p_fdr\n";
            csv.precision(12);
            if (mt.v1) {
                csv << "v1_angular_error_deg," << angular_error_v1(a, b, mask.get()) << ",,,,\n";
            } else {
                csv << "mae," << mae(a, b, mask.get()) << ",,,,\n";
                if (a.channels == 1 && b.channels == 1)
                    csv << "lncc," << lncc(a, b, mt.lncc_window) << ",,,,\n";
            }
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        set_thread_count(threads);
        run();
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return kExitFormat;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kExitFormat;
    } catch (const ArgumentError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const GeometryError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const StateError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumerical;
    }
    return kExitOk;
}
