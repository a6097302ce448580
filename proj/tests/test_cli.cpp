#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dtisr/nifti.hpp"
#include "dtisr/gradients.hpp"
#include "dtisr/shsample.hpp"
#include "dtisr/stats.hpp"

#include "json.hpp"

using namespace dtisr;
namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "dtisr_cli_tests";

int run_cli(const std::string& args) {
    const std::string cmd = std::string(DTISR_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("cli end-to-end workflows") {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
    const std::string work = kWork.string();

    // ------------------------------------------------------------- phantom
    REQUIRE(run_cli("phantom --scene single_bundle --size 14 14 12 --voxel 3.5 --seed 5 --out " + work +
                    "/ph") == 0);
    REQUIRE(fs::exists(kWork / "ph" / "dwi.nii"));
    REQUIRE(fs::exists(kWork / "ph" / "manifest.json"));

    SUBCASE("manifest records tool, seed and config echo") {
        const auto manifest = nlohmann::json::parse(slurp(kWork / "ph" / "manifest.json"));
        CHECK(manifest.at("seed").get<std::uint64_t>() == 5);
        CHECK(manifest.at("subcommand") == "phantom");
        CHECK(manifest.contains("config"));
    }

    SUBCASE("fit reproduces the phantom FA map") {
        REQUIRE(run_cli("fit --dwi " + work + "/ph/dwi.nii --bvals " + work + "/ph/dwi.bval --bvecs " +
                        work + "/ph/dwi.bvec --out " + work + "/fit") == 0);
        const Volume fa = read_nifti(work + "/fit/fa.nii");
        const Volume truth = read_nifti(work + "/ph/fa_truth.nii");
        const Volume labels = read_nifti(work + "/ph/labels.nii");
        double worst = 0;
        for (std::size_t i = 0; i < fa.data.size(); ++i)
            if (labels.data[i] != 0) worst = std::max(worst, std::abs(fa.data[i] - truth.data[i]));
        // float32 round-trip bounds the agreement, the fit itself is ~1e-9
        CHECK(worst < 1e-5);
        const auto manifest = nlohmann::json::parse(slurp(kWork / "fit" / "manifest.json"));
        REQUIRE(manifest.at("inputs").size() == 3);
        for (const auto& in : manifest.at("inputs")) CHECK(in.at("fnv1a64").get<std::string>().size() == 16);
    }

    SUBCASE("degrade emits the 9-direction protocol and is seed-deterministic") {
        REQUIRE(run_cli("degrade --dwi " + work + "/ph/dwi.nii --bvals " + work + "/ph/dwi.bval --bvecs " +
                        work + "/ph/dwi.bvec --resolution 3.5 --rician-sigma 20 --seed 9 --out " + work +
                        "/dg1") == 0);
        REQUIRE(run_cli("degrade --dwi " + work + "/ph/dwi.nii --bvals " + work + "/ph/dwi.bval --bvecs " +
                        work + "/ph/dwi.bvec --resolution 3.5 --rician-sigma 20 --seed 9 --out " + work +
                        "/dg2") == 0);
        const auto t = parse_gradient_table(work + "/dg1/degraded.bval", work + "/dg1/degraded.bvec");
        CHECK(t.dwi_indices().size() == 9);
        CHECK(t.b0_indices().size() == 3);
        CHECK(slurp(kWork / "dg1" / "degraded.nii") == slurp(kWork / "dg2" / "degraded.nii"));
    }

    SUBCASE("sh-fit, train and superresolve chain") {
        REQUIRE(run_cli("sh-fit --dwi " + work + "/ph/dwi.nii --bvals " + work + "/ph/dwi.bval --bvecs " +
                        work + "/ph/dwi.bvec --shell 700 --out " + work + "/sh") == 0);
        const ShSample sample = read_sh_sample(work + "/sh/shsample.nii");
        CHECK(sample.grid().dims == std::array<int, 3>{14, 14, 12});

        REQUIRE(run_cli("train --data " + work + "/sh/shsample.nii --out " + work +
                        "/tr --epochs 1 --iterations 2 --levels 2 --features 2 --patch 8 8 8 --seed 3") == 0);
        REQUIRE(fs::exists(kWork / "tr" / "checkpoint.bin"));
        const std::string loss_csv = slurp(kWork / "tr" / "loss.csv");
        CHECK(loss_csv.find("epoch,iteration,lr,total") == 0);

        REQUIRE(run_cli("superresolve --checkpoint " + work + "/tr/checkpoint.bin --in " + work +
                        "/sh/shsample.nii --factor 2 --out " + work + "/sr") == 0);
        const ShSample out = read_sh_sample(work + "/sr/superresolved.nii");
        CHECK(out.grid().dims == std::array<int, 3>{28, 28, 24});
    }

    SUBCASE("metrics CSV has the fixed column header") {
        REQUIRE(run_cli("metrics --a " + work + "/ph/fa_truth.nii --b " + work + "/ph/fa_truth.nii --out " +
                        work + "/metrics.csv") == 0);
        const std::string csv = slurp(kWork / "metrics.csv");
        CHECK(csv.find("metric,value,ci_low,ci_high,p_raw,p_fdr") == 0);
        CHECK(csv.find("mae,0") != std::string::npos);
    }

    SUBCASE("augment-preview runs the chain deterministically") {
        REQUIRE(run_cli("sh-fit --dwi " + work + "/ph/dwi.nii --bvals " + work + "/ph/dwi.bval --bvecs " +
                        work + "/ph/dwi.bvec --shell 700 --out " + work + "/sh2") == 0);
        REQUIRE(run_cli("augment-preview --in " + work + "/sh2/shsample.nii --crop 10 10 10 --seed 4 --out " +
                        work + "/aug1") == 0);
        REQUIRE(run_cli("augment-preview --in " + work + "/sh2/shsample.nii --crop 10 10 10 --seed 4 --out " +
                        work + "/aug2") == 0);
        CHECK(slurp(kWork / "aug1" / "augmented.nii") == slurp(kWork / "aug2" / "augmented.nii"));
    }
}

TEST_CASE("cli bias correction workflow") {
    fs::create_directories(kWork);
    const std::string work = kWork.string();
    REQUIRE(run_cli("phantom --scene single_bundle --size 14 14 12 --voxel 3.5 --seed 21 --inject-bias "
                    "--out " + work + "/phb") == 0);
    REQUIRE(run_cli("bias-correct --dwi " + work + "/phb/dwi.nii --bvals " + work +
                    "/phb/dwi.bval --bvecs " + work + "/phb/dwi.bvec --atlas " + work +
                    "/phb/atlas.nii --adam-steps 120 --lbfgs-iterations 60 --seed 1 --out " + work +
                    "/bc") == 0);
    REQUIRE(fs::exists(kWork / "bc" / "corrected.nii"));
    REQUIRE(fs::exists(kWork / "bc" / "direction_fields.nii"));
    REQUIRE(fs::exists(kWork / "bc" / "coefficients.json"));

    // corrected FA is closer to truth than the biased input
    const Volume labels = read_nifti(work + "/phb/labels.nii");
    const Volume truth = read_nifti(work + "/phb/fa_truth.nii");
    REQUIRE(run_cli("fit --dwi " + work + "/phb/dwi.nii --bvals " + work + "/phb/dwi.bval --bvecs " + work +
                    "/phb/dwi.bvec --out " + work + "/fit_biased") == 0);
    REQUIRE(run_cli("fit --dwi " + work + "/bc/corrected.nii --bvals " + work + "/bc/corrected.bval "
                    "--bvecs " + work + "/bc/corrected.bvec --out " + work + "/fit_corrected") == 0);
    const Volume fa_biased = read_nifti(work + "/fit_biased/fa.nii");
    const Volume fa_corrected = read_nifti(work + "/fit_corrected/fa.nii");
    double rms_biased = 0, rms_corrected = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < truth.data.size(); ++i) {
        if (labels.data[i] == 0) continue;
        rms_biased += std::pow(fa_biased.data[i] - truth.data[i], 2);
        rms_corrected += std::pow(fa_corrected.data[i] - truth.data[i], 2);
        ++count;
    }
    rms_biased = std::sqrt(rms_biased / double(count));
    rms_corrected = std::sqrt(rms_corrected / double(count));
    CHECK(rms_corrected < 0.5 * rms_biased);
}

TEST_CASE("cli exit codes") {
    fs::create_directories(kWork);
    const std::string work = kWork.string();

    SUBCASE("unknown flags and missing requireds are usage errors") {
        CHECK(run_cli("fit --nonsense") == 2);
        CHECK(run_cli("") == 2);
    }
    SUBCASE("missing input file is a usage error") {
        CHECK(run_cli("fit --dwi " + work + "/does_not_exist.nii --bvals x --bvecs y --out " + work +
                      "/nope") == 2);
    }
    SUBCASE("malformed NIfTI is a format error") {
        const auto bad = kWork / "bad.nii";
        std::ofstream f(bad, std::ios::binary);
        f << "this is not a nifti file but long enough to look like one................"
             "......................................................................."
             "......................................................................."
             "......................................................................."
             "......................................................................";
        f.close();
        std::ofstream(kWork / "bad.bval") << "0 700\n";
        std::ofstream(kWork / "bad.bvec") << "0 1\n0 0\n0 0\n";
        CHECK(run_cli("fit --dwi " + bad.string() + " --bvals " + work + "/bad.bval --bvecs " + work +
                      "/bad.bvec --out " + work + "/nope2") == 3);
    }
}
