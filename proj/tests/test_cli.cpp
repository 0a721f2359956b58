#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "../tools/cli.hpp"
#include "ghnn/systems.hpp"
#include "ghnn/train.hpp"

using namespace ghnn;
using nlohmann::json;

namespace {

int run_cli(const std::vector<std::string>& args) {
    std::vector<const char*> argv = {"ghnn"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return cli_main(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

bool exists(const std::string& path) { return std::ifstream(path).good(); }

const std::string dir = "/tmp/ghnn_cli_test";

}  // namespace

TEST_CASE("generate shapes and determinism") {
    std::system(("mkdir -p " + dir).c_str());
    REQUIRE(run_cli({"generate", "--system", "pendulum", "--ics", "2", "--duration", "20", "--freq", "50",
                     "--noise", "0.1", "--seed", "1", "--out", dir + "/pend.json"}) == 0);
    TrajectoryDataset ds = TrajectoryDataset::load(dir + "/pend.json");
    CHECK(ds.trajectories.size() == 2);
    CHECK(ds.trajectories[0].states.rows() == 1000);
    CHECK(ds.noise_sigma == 0.1);
    CHECK(exists(dir + "/pend.json.manifest.json"));

    // noiseless flag
    REQUIRE(run_cli({"generate", "--system", "duffing", "--ics", "1", "--duration", "2", "--freq", "25",
                     "--noise", "0", "--seed", "2", "--out", dir + "/duff.json"}) == 0);
    TrajectoryDataset d2 = TrajectoryDataset::load(dir + "/duff.json");
    CHECK(d2.noise_sigma == 0.0);

    // --samples as an alternative to --freq
    REQUIRE(run_cli({"generate", "--system", "nbody", "--nbody-particles", "2", "--ics", "1", "--duration",
                     "3", "--samples", "150", "--noise", "0", "--seed", "7", "--out", dir + "/nb.json"}) == 0);
    TrajectoryDataset nb = TrajectoryDataset::load(dir + "/nb.json");
    CHECK(nb.n == 8);
    CHECK(nb.trajectories[0].states.rows() == 150);

    // byte-identical rerun
    REQUIRE(run_cli({"generate", "--system", "pendulum", "--ics", "2", "--duration", "20", "--freq", "50",
                     "--noise", "0.1", "--seed", "1", "--out", dir + "/pend2.json"}) == 0);
    CHECK(slurp(dir + "/pend.json") == slurp(dir + "/pend2.json"));
}

TEST_CASE("usage and io errors carry the documented exit codes") {
    CHECK(run_cli({"generate", "--system", "not-a-system", "--out", dir + "/x.json"}) == 2);
    CHECK(run_cli({"generate", "--no-such-flag"}) == 2);
    CHECK(run_cli({"train", "--data", "/nonexistent/path.json", "--out", dir + "/x.json"}) == 3);
    CHECK(run_cli({"eval", "--checkpoint", "/nonexistent/ck.json", "--out", dir + "/x.json"}) == 3);
}

TEST_CASE("train: epochs 0 writes an initialized checkpoint; hnn rejects odd dimensions") {
    REQUIRE(run_cli({"generate", "--system", "lorenz63", "--ics", "2", "--duration", "2", "--freq", "50",
                     "--noise", "0.05", "--seed", "3", "--out", dir + "/lor.json"}) == 0);
    // odd state dimension is a configuration error before any training
    CHECK(run_cli({"train", "--data", dir + "/lor.json", "--model", "hnn", "--epochs", "1", "--out",
                   dir + "/hnn.json"}) == 2);

    REQUIRE(run_cli({"train", "--data", dir + "/lor.json", "--model", "fcnn", "--loss", "weak", "--epochs",
                     "0", "--batch-size", "4", "--batch-steps", "10", "--k-test", "12", "--ensemble", "1",
                     "--seed", "4", "--width", "8", "--out", dir + "/init.json"}) == 0);
    CheckpointMeta meta;
    DecompModel m = load_checkpoint(dir + "/init.json", &meta);
    CHECK(m.dim() == 3);
    CHECK(meta.epochs == 0);
    CHECK(exists(dir + "/init.json.history.csv"));
}

TEST_CASE("config file provides defaults, flags win") {
    std::ofstream cfg(dir + "/cfg.json");
    cfg << R"({"epochs": 0, "width": 8, "model": "fcnn"})";
    cfg.close();
    REQUIRE(run_cli({"train", "--config", dir + "/cfg.json", "--data", dir + "/lor.json", "--loss", "weak",
                     "--batch-size", "4", "--batch-steps", "10", "--k-test", "12", "--ensemble", "1",
                     "--seed", "4", "--out", dir + "/cfgd.json"}) == 0);
    CheckpointMeta meta;
    DecompModel m = load_checkpoint(dir + "/cfgd.json", &meta);
    CHECK(meta.epochs == 0);  // from the config file
    CHECK(m.config().hidden == std::vector<int>{8, 8});

    // flag overrides the config value
    REQUIRE(run_cli({"train", "--config", dir + "/cfg.json", "--data", dir + "/lor.json", "--loss", "weak",
                     "--epochs", "1", "--batch-size", "4", "--batch-steps", "10", "--k-test", "12",
                     "--ensemble", "1", "--seed", "4", "--out", dir + "/cfgd2.json"}) == 0);
    load_checkpoint(dir + "/cfgd2.json", &meta);
    CHECK(meta.epochs == 1);
}

TEST_CASE("eval of a ground-truth-backed checkpoint gives near-zero errors") {
    // analytic checkpoints carry no parameters, only the system tag
    json j;
    j["schema_version"] = 1;
    j["model"] = {{"variant", "analytic"}, {"n", 2},        {"hidden", json::array()},
                  {"epsilon", 1e-3},       {"rehu_delta", 1.0}, {"seed", 0}};
    j["params"] = json::object();
    j["meta"] = {{"seed", 0},    {"epochs", 0},          {"loss", "weak"},
                 {"system", "pendulum"}, {"final_train_loss", 0.0}, {"best_val_loss", 0.0}};
    std::ofstream f(dir + "/true.json");
    f << j.dump() << "\n";
    f.close();

    REQUIRE(run_cli({"eval", "--checkpoint", dir + "/true.json", "--ics", "6", "--horizon", "10", "--points",
                     "10", "--seed", "5", "--out", dir + "/true_eval.json"}) == 0);
    json rep = json::parse(slurp(dir + "/true_eval.json"));
    CHECK(rep["metrics"]["state_error"]["mean"].get<double>() < 1e-4);
    CHECK(rep["metrics"]["derivative_error"]["mean"].get<double>() < 1e-4);
    CHECK(rep["metrics"]["diverged"].get<bool>() == false);
}

TEST_CASE("flux command on a zero-weight known-h checkpoint") {
    auto sys = AnalyticSystem::make(SystemKind::NBody, 2);
    ModelConfig cfg;
    cfg.variant = ModelVariant::KnownH;
    cfg.n = sys.dim();
    cfg.hidden = {8};
    cfg.seed = 11;
    cfg.known_h_system = "nbody";
    cfg.known_h_energy = sys.energy_field();
    DecompModel m = DecompModel::build(cfg);
    for (size_t i = 0; i < m.params().count(); ++i) {
        Mat& v = m.params().value(static_cast<int>(i));
        for (size_t k = 0; k < v.size(); ++k) v[k] = 0.0;
    }
    CheckpointMeta meta;
    meta.loss_kind = "weak";
    meta.system = "nbody";
    save_checkpoint(dir + "/kh0.json", m, meta);

    REQUIRE(run_cli({"flux", "--checkpoint", dir + "/kh0.json", "--data", dir + "/nb.json", "--at-index",
                     "10", "--csv", "--out", dir + "/flux.json"}) == 0);
    json rep = json::parse(slurp(dir + "/flux.json"));
    CHECK(rep["total_rate"].get<double>() == 0.0);
    for (const auto& p : rep["per_particle"]) CHECK(p.get<double>() == 0.0);
    CHECK(exists(dir + "/flux.json.csv"));

    // row sum equals the reported total
    double sum = 0.0;
    for (const auto& p : rep["per_particle"]) sum += p.get<double>();
    CHECK(sum == rep["total_rate"].get<double>());

    // wrong variant is rejected
    REQUIRE(run_cli({"train", "--data", dir + "/lor.json", "--model", "fcnn", "--loss", "weak", "--epochs",
                     "0", "--batch-size", "4", "--batch-steps", "10", "--k-test", "12", "--ensemble", "1",
                     "--seed", "4", "--width", "8", "--out", dir + "/fc0.json"}) == 0);
    CHECK(run_cli({"flux", "--checkpoint", dir + "/fc0.json", "--data", dir + "/lor.json", "--at-index", "0",
                   "--out", dir + "/fluxbad.json"}) == 2);
}

TEST_CASE("compare emits a deterministic report and a separate times file") {
    REQUIRE(run_cli({"generate", "--system", "pendulum", "--ics", "2", "--duration", "4", "--freq", "50",
                     "--noise", "0.05", "--seed", "21", "--out", dir + "/cmp_data.json"}) == 0);
    REQUIRE(run_cli({"compare", "--data", dir + "/cmp_data.json", "--losses", "weak,deriv", "--epochs", "5",
                     "--batch-size", "8", "--batch-steps", "20", "--k-test", "20", "--seed", "22", "--width",
                     "8", "--eval-ics", "4", "--eval-horizon", "5", "--eval-points", "5", "--out",
                     dir + "/cmp"}) == 0);
    CHECK(exists(dir + "/cmp.report.json"));
    CHECK(exists(dir + "/cmp.times.csv"));
    json rep = json::parse(slurp(dir + "/cmp.report.json"));
    CHECK(rep["losses"].contains("weak"));
    CHECK(rep["losses"].contains("deriv"));
    // times live outside the deterministic report
    CHECK(slurp(dir + "/cmp.report.json").find("seconds") == std::string::npos);
}
