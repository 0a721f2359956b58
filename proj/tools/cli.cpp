#include "cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ghnn/eval.hpp"
#include "ghnn/losses.hpp"
#include "ghnn/systems.hpp"
#include "ghnn/train.hpp"

namespace ghnn {
namespace {

using nlohmann::json;

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

std::string slurp_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw_io("cannot open: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::string hash_hex(const std::string& bytes) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(bytes)));
    return buf;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw_io("cannot open for writing: " + path);
    f << text;
    if (!f) throw_io("write failed: " + path);
}

/// Sidecar manifest: config echo, seed, content hashes of inputs, outputs and
/// timings. Timings are informational; all primary outputs are byte-stable
/// under identical inputs.
void write_manifest(const std::string& anchor_out, const std::string& command, const json& config_echo,
                    uint64_t seed, const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs, double wall_seconds) {
    json m;
    m["schema_version"] = 1;
    m["command"] = command;
    m["config"] = config_echo;
    m["seed"] = seed;
    json ih = json::object();
    for (const auto& p : inputs) ih[p] = hash_hex(slurp_file(p));
    m["input_hashes"] = std::move(ih);
    m["outputs"] = outputs;
    m["timings"] = {{"wall_seconds", wall_seconds}};
    write_text(anchor_out + ".manifest.json", m.dump(2) + "\n");
}

json load_config_file(const std::string& path) {
    if (path.empty()) return json::object();
    json j = json::parse(slurp_file(path), nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw_config("config file is not a JSON object: " + path);
    return j;
}

// flags > config file > defaults
template <typename T>
void overlay(const CLI::App& app, const json& cfg, const std::string& flag, const std::string& key, T& target) {
    if (app.count(flag) > 0) return;
    if (cfg.contains(key)) target = cfg.at(key).get<T>();
}

std::string format_seconds(double s) {
    if (s < 0) return "-";
    const long total = std::lround(s);
    if (total < 60) return std::to_string(total) + "s";
    return std::to_string(total / 60) + "min " + std::to_string(total % 60) + "s";
}

std::string format_pm(double mean, double std_dev) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3g +/- %.2g", mean, std_dev);
    return buf;
}

AnalyticSystem system_or_throw(const std::string& name, int n_hint) {
    auto sys = AnalyticSystem::from_name(name, std::max(1, n_hint / 4));
    if (!sys) throw_config("unknown system '" + name + "' (pendulum, duffing, lorenz63, nbody)");
    return *sys;
}

std::vector<int> hidden_widths(int width, int depth) {
    if (width < 1 || depth < 1) throw_config("--width and --depth must be positive");
    return std::vector<int>(static_cast<size_t>(depth), width);
}

json metrics_to_json(const MetricsReport& rep) {
    json j;
    j["state_error_included"] = rep.state_error_included;
    j["state_error"] = {{"mean", rep.state_error_mean}, {"std", rep.state_error_std},
                        {"per_ic", rep.per_ic_state_error}};
    j["derivative_error"] = {{"mean", rep.deriv_error_mean}, {"std", rep.deriv_error_std},
                             {"per_ic", rep.per_ic_deriv_error}};
    j["diverged"] = rep.diverged;
    j["diverged_ics"] = rep.diverged_ics;
    j["diverged_ic_indices"] = rep.diverged_ic_indices;
    return j;
}

std::string state_error_cell(const MetricsReport& rep, int n_ics) {
    if (!rep.state_error_included) return "n/a (chaotic)";
    if (rep.diverged_ics >= (n_ics + 1) / 2) return "Diverged";
    std::string cell = format_pm(rep.state_error_mean, rep.state_error_std);
    if (rep.diverged_ics > 0) cell += " (" + std::to_string(rep.diverged_ics) + " diverged)";
    return cell;
}

// ---------------------------------------------------------------------------
// generate

int cmd_generate(const CLI::App& app, const json& cfgfile, std::string system, int ics, double duration,
                 double freq, long samples, double noise, uint64_t seed, std::string out, std::string csv,
                 int particles) {
    const double t0 = now_seconds();
    if (out.empty()) throw_config("--out is required");
    if (samples > 0) {
        if (app.count("--freq") > 0) throw_config("give either --freq or --samples, not both");
        freq = static_cast<double>(samples) / duration;
    }
    AnalyticSystem sys = system_or_throw(system, particles * 4);
    if (sys.kind() == SystemKind::NBody) sys = AnalyticSystem::make(SystemKind::NBody, particles);

    std::vector<std::vector<double>> starts;
    for (int i = 0; i < ics; ++i) {
        Rng rng = Rng::stream(seed, 0x1C5ULL + static_cast<uint64_t>(i));
        starts.push_back(sys.sample_ic(rng));
    }
    TrajectoryDataset ds = generate(sys, starts, duration, freq, noise, seed);
    ds.save(out);
    std::vector<std::string> outputs = {out};
    if (!csv.empty()) {
        ds.export_csv(csv);
        for (size_t i = 0; i < ds.trajectories.size(); ++i) {
            char idx[8];
            std::snprintf(idx, sizeof(idx), "%03zu", i);
            outputs.push_back(csv + "_" + idx + ".csv");
        }
    }

    json echo = {{"system", std::string(sys.name())}, {"ics", ics},       {"duration", duration},
                 {"freq", freq},                      {"noise", noise},   {"seed", seed},
                 {"particles", particles},            {"config", cfgfile}};
    write_manifest(out, "generate", echo, seed, {}, outputs, now_seconds() - t0);
    std::cout << "wrote " << out << " (" << ds.trajectories.size() << " trajectories, "
              << (ds.trajectories.empty() ? 0 : ds.trajectories[0].states.rows()) << " samples each)\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainCliOpts {
    std::string data, val, out, model = "ghnn-global", loss = "weak";
    int epochs = 300, batch_size = 120, batch_steps = 50, k_test = 200;
    double shape = 10.0;
    int ensemble = 3;
    uint64_t seed = 0;
    int width = 64, depth = 2;
    double lr = 1e-3, weight_decay = 1e-4;
    double epsilon = 1e-3, rehu_delta = 1.0, init_out_scale = 1.0;
    double lambda_flux = 0.0, lambda_curl = 0.0;
    int state_substeps = 4;
    int threads = 1, val_every = 1;
};

DecompModel run_training(const TrainCliOpts& o, const TrajectoryDataset& train_ds,
                         const TrajectoryDataset& val_ds, TrainResult& result, CheckpointMeta& meta) {
    ModelConfig proto;
    const auto variant = model_variant_from_name(o.model);
    if (!variant || *variant == ModelVariant::Analytic)
        throw_config("unknown model '" + o.model +
                     "' (ghnn-global, ghnn-local, ghnn-conserved, ghnn-flux, known-h, fcnn, hnn)");
    proto.variant = *variant;
    proto.n = train_ds.n;
    proto.hidden = hidden_widths(o.width, o.depth);
    proto.epsilon = o.epsilon;
    proto.rehu_delta = o.rehu_delta;
    proto.init_out_scale = o.init_out_scale;
    if (proto.variant == ModelVariant::Hnn && train_ds.n % 2 != 0)
        throw_config("hnn requires an even state dimension; data has n=" + std::to_string(train_ds.n));
    if (proto.variant == ModelVariant::KnownH) {
        AnalyticSystem sys = system_or_throw(train_ds.system, train_ds.n);
        if (sys.dim() != train_ds.n) throw_config("known-h: system/data dimension mismatch");
        proto.known_h_system = train_ds.system;
        proto.known_h_energy = sys.energy_field();
    }

    TrainConfig cfg;
    cfg.lr = o.lr;
    cfg.weight_decay = o.weight_decay;
    cfg.epochs = o.epochs;
    cfg.batch.batch_size = o.batch_size;
    cfg.batch.batch_steps = o.batch_steps;
    cfg.ensemble_count = o.ensemble;
    cfg.seed = o.seed;
    cfg.val_every = o.val_every;
    if (o.loss == "weak")
        cfg.loss.kind = LossKind::Weak;
    else if (o.loss == "deriv")
        cfg.loss.kind = LossKind::Deriv;
    else if (o.loss == "state")
        cfg.loss.kind = LossKind::State;
    else
        throw_config("unknown loss '" + o.loss + "' (weak, deriv, state)");
    cfg.loss.k_test = o.k_test;
    cfg.loss.shape_gamma = o.shape;
    cfg.loss.state_cfg = IntegrationConfig::rk4(0.0, o.state_substeps);
    cfg.loss.lambda_curl = o.lambda_curl;
    cfg.loss.threads = o.threads;

    std::vector<std::vector<double>> hdot;
    if (o.lambda_flux > 0.0) {
        AnalyticSystem sys = system_or_throw(train_ds.system, train_ds.n);
        if (!sys.has_decomposition())
            throw_config("flux prior: no analytic rate oracle for system '" + train_ds.system + "'");
        hdot = nominal_rate_series(sys, train_ds);
        cfg.loss.lambda_flux = o.lambda_flux;
        cfg.loss.hdot_nom = &hdot;
    }

    result = train(proto, train_ds, val_ds, cfg);

    meta.seed = o.seed;
    meta.epochs = o.epochs;
    meta.loss_kind = o.loss;
    meta.system = train_ds.system;
    meta.final_train_loss = result.final_train_loss;
    meta.best_val_loss = result.best_val_loss;
    return result.best_model;
}

std::string history_csv(const TrainResult& r) {
    std::ostringstream ss;
    ss.precision(17);
    ss << "member,epoch,train_loss,val_loss,wall_seconds\n";
    for (const auto& m : r.members)
        for (const auto& rec : m.history)
            ss << m.member << "," << rec.epoch << "," << rec.train_loss << "," << rec.val_loss << ","
               << rec.wall_seconds << "\n";
    return ss.str();
}

int cmd_train(const TrainCliOpts& o, const json& cfgfile) {
    const double t0 = now_seconds();
    if (o.data.empty() || o.out.empty()) throw_config("--data and --out are required");
    TrajectoryDataset train_ds = TrajectoryDataset::load(o.data);
    TrajectoryDataset val_ds = o.val.empty() ? train_ds : TrajectoryDataset::load(o.val);

    TrainResult result;
    CheckpointMeta meta;
    DecompModel best = run_training(o, train_ds, val_ds, result, meta);
    save_checkpoint(o.out, best, meta);
    const std::string hist_path = o.out + ".history.csv";
    write_text(hist_path, history_csv(result));

    int failed = 0;
    for (const auto& m : result.members)
        if (m.failed) ++failed;
    if (failed > 0)
        std::cout << "warning: " << failed << "/" << result.members.size()
                  << " ensemble members diverged and were discarded\n";
    std::cout << "best member " << result.best_member << " val loss "
              << (o.epochs > 0 ? result.best_val_loss : 0.0) << ", wrote " << o.out << "\n";

    json echo = {{"data", o.data},   {"val", o.val},       {"model", o.model},     {"loss", o.loss},
                 {"epochs", o.epochs}, {"batch_size", o.batch_size}, {"batch_steps", o.batch_steps},
                 {"k_test", o.k_test}, {"shape", o.shape},  {"ensemble", o.ensemble}, {"seed", o.seed},
                 {"width", o.width},  {"depth", o.depth},   {"lr", o.lr},           {"weight_decay", o.weight_decay},
                 {"epsilon", o.epsilon}, {"rehu_delta", o.rehu_delta}, {"init_out_scale", o.init_out_scale},
                 {"lambda_flux", o.lambda_flux}, {"lambda_curl", o.lambda_curl},
                 {"state_substeps", o.state_substeps}, {"config", cfgfile}};
    std::vector<std::string> inputs = {o.data};
    if (!o.val.empty()) inputs.push_back(o.val);
    write_manifest(o.out, "train", echo, o.seed, inputs, {o.out, hist_path}, now_seconds() - t0);
    return 0;
}

// ---------------------------------------------------------------------------
// eval

int cmd_eval(const std::string& checkpoint, std::string system, int ics, double horizon, int points,
             uint64_t seed, bool no_state_error, int threads, const std::string& out, const json& cfgfile) {
    const double t0 = now_seconds();
    if (checkpoint.empty() || out.empty()) throw_config("--checkpoint and --out are required");
    CheckpointMeta meta;
    DecompModel model = load_checkpoint(checkpoint, &meta);
    if (system.empty()) system = meta.system;
    AnalyticSystem sys = system_or_throw(system, model.dim());

    EvalConfig cfg;
    cfg.n_ics = ics;
    cfg.horizon = horizon;
    cfg.n_pts = points;
    cfg.seed = seed;
    cfg.include_state_error = !no_state_error;
    cfg.threads = threads;
    MetricsReport rep = evaluate(model, sys, cfg);

    json j;
    j["schema_version"] = 1;
    j["checkpoint"] = checkpoint;
    j["system"] = system;
    j["n_ics"] = ics;
    j["horizon"] = horizon;
    j["points"] = points;
    j["seed"] = seed;
    j["metrics"] = metrics_to_json(rep);
    write_text(out, j.dump(2) + "\n");

    std::cout << "Metric            Value\n";
    std::cout << "State Error       " << state_error_cell(rep, ics) << "\n";
    std::cout << "Derivative Error  " << format_pm(rep.deriv_error_mean, rep.deriv_error_std) << "\n";
    std::cout << "Diverged ICs      " << rep.diverged_ics << "/" << ics << "\n";

    json echo = {{"checkpoint", checkpoint}, {"system", system}, {"ics", ics},   {"horizon", horizon},
                 {"points", points},         {"seed", seed},     {"config", cfgfile}};
    write_manifest(out, "eval", echo, seed, {checkpoint}, {out}, now_seconds() - t0);
    return 0;
}

// ---------------------------------------------------------------------------
// compare

int cmd_compare(TrainCliOpts base, const std::string& losses_csv, int eval_ics, double eval_horizon,
                int eval_points, bool no_state_error, const std::string& out, const json& cfgfile) {
    const double t0 = now_seconds();
    if (base.data.empty() || out.empty()) throw_config("--data and --out are required");
    TrajectoryDataset train_ds = TrajectoryDataset::load(base.data);
    TrajectoryDataset val_ds = base.val.empty() ? train_ds : TrajectoryDataset::load(base.val);
    AnalyticSystem sys = system_or_throw(train_ds.system, train_ds.n);

    std::vector<std::string> losses;
    {
        std::stringstream ss(losses_csv);
        std::string item;
        while (std::getline(ss, item, ',')) losses.push_back(item);
    }
    if (losses.empty()) throw_config("--losses must name at least one of weak,deriv,state");

    struct Row {
        std::string loss;
        MetricsReport rep;
        double train_seconds = 0;
        bool trained = false;
        std::string failure;
    };
    std::vector<Row> rows;

    for (const std::string& loss : losses) {
        Row row;
        row.loss = loss;
        TrainCliOpts o = base;
        o.model = "fcnn";
        o.loss = loss;
        TrainResult result;
        CheckpointMeta meta;
        const double tt0 = now_seconds();
        try {
            DecompModel model = run_training(o, train_ds, val_ds, result, meta);
            row.train_seconds = now_seconds() - tt0;
            row.trained = true;
            const std::string ck = out + "." + loss + ".ckpt.json";
            save_checkpoint(ck, model, meta);
            EvalConfig ec;
            ec.n_ics = eval_ics;
            ec.horizon = eval_horizon;
            ec.n_pts = eval_points;
            ec.seed = base.seed;
            ec.include_state_error = !no_state_error;
            ec.threads = base.threads;
            row.rep = evaluate(model, sys, ec);
        } catch (const Error& e) {
            row.train_seconds = now_seconds() - tt0;
            row.failure = e.what();  // a diverged training is an outcome, not a crash
        }
        rows.push_back(std::move(row));
    }

    // deterministic report (no timings)
    json j;
    j["schema_version"] = 1;
    j["data"] = base.data;
    j["system"] = train_ds.system;
    j["epochs"] = base.epochs;
    j["seed"] = base.seed;
    json per = json::object();
    for (const Row& r : rows) {
        json entry;
        entry["trained"] = r.trained;
        if (r.trained)
            entry["metrics"] = metrics_to_json(r.rep);
        else
            entry["failure"] = r.failure;
        per[r.loss] = std::move(entry);
    }
    j["losses"] = std::move(per);
    const std::string report_path = out + ".report.json";
    write_text(report_path, j.dump(2) + "\n");

    // volatile wall-clock table
    std::ostringstream times;
    times << "loss,train_seconds\n";
    times.precision(6);
    for (const Row& r : rows) times << r.loss << "," << r.train_seconds << "\n";
    const std::string times_path = out + ".times.csv";
    write_text(times_path, times.str());

    auto header = [](const std::string& l) {
        if (l == "weak") return std::string("Weak form regression");
        if (l == "deriv") return std::string("Derivative regression");
        if (l == "state") return std::string("State regression");
        return l;
    };
    auto cell = [&](const Row& r, int what) -> std::string {
        if (!r.trained) return "Diverged";
        switch (what) {
            case 0: return state_error_cell(r.rep, eval_ics);
            case 1: return format_pm(r.rep.deriv_error_mean, r.rep.deriv_error_std);
            default: return format_seconds(r.train_seconds);
        }
    };
    std::printf("%-18s", "Metric");
    for (const Row& r : rows) std::printf("  %-24s", header(r.loss).c_str());
    std::printf("\n");
    const char* names[3] = {"State Error", "Derivative Error", "Train Time"};
    for (int w = 0; w < 3; ++w) {
        std::printf("%-18s", names[w]);
        for (const Row& r : rows) std::printf("  %-24s", cell(r, w).c_str());
        std::printf("\n");
    }

    json echo = {{"data", base.data},     {"val", base.val},   {"losses", losses_csv},
                 {"epochs", base.epochs}, {"seed", base.seed}, {"batch_size", base.batch_size},
                 {"batch_steps", base.batch_steps}, {"config", cfgfile}};
    std::vector<std::string> inputs = {base.data};
    if (!base.val.empty()) inputs.push_back(base.val);
    write_manifest(out, "compare", echo, base.seed, inputs, {report_path, times_path},
                   now_seconds() - t0);
    return 0;
}

// ---------------------------------------------------------------------------
// flux

int cmd_flux(const std::string& checkpoint, const std::string& data, int traj, int at_index,
             const std::string& out, bool csv, const json& cfgfile) {
    const double t0 = now_seconds();
    if (checkpoint.empty() || data.empty() || out.empty())
        throw_config("--checkpoint, --data and --out are required");
    CheckpointMeta meta;
    DecompModel model = load_checkpoint(checkpoint, &meta);
    if (model.variant() != ModelVariant::KnownH)
        throw_config("flux requires a known-h checkpoint, got variant '" +
                     std::string(model_variant_name(model.variant())) + "'");
    TrajectoryDataset ds = TrajectoryDataset::load(data);
    if (traj < 0 || static_cast<size_t>(traj) >= ds.trajectories.size())
        throw_config("--traj out of range");
    const Mat& st = ds.trajectories[static_cast<size_t>(traj)].states;
    if (at_index < 0 || at_index >= st.rows()) throw_config("--at-index out of range");

    std::vector<double> x(static_cast<size_t>(ds.n));
    for (int c = 0; c < ds.n; ++c) x[static_cast<size_t>(c)] = st(at_index, c);
    FluxReport rep = flux_report(model, x);

    json j;
    j["schema_version"] = 1;
    j["checkpoint"] = checkpoint;
    j["data"] = data;
    j["traj"] = traj;
    j["at_index"] = at_index;
    j["time"] = ds.trajectories[static_cast<size_t>(traj)].times[static_cast<size_t>(at_index)];
    j["particles"] = rep.particles;
    j["total_rate"] = rep.total_rate;
    j["per_particle"] = rep.per_particle;
    json pos = json::array(), vel = json::array(), fld = json::array();
    for (int p = 0; p < rep.particles; ++p) {
        pos.push_back({rep.positions[static_cast<size_t>(p)][0], rep.positions[static_cast<size_t>(p)][1]});
        vel.push_back({rep.velocities[static_cast<size_t>(p)][0], rep.velocities[static_cast<size_t>(p)][1]});
        fld.push_back({rep.field_vectors[static_cast<size_t>(p)][0], rep.field_vectors[static_cast<size_t>(p)][1]});
    }
    j["positions"] = std::move(pos);
    j["velocities"] = std::move(vel);
    j["field_vectors"] = std::move(fld);
    write_text(out, j.dump(2) + "\n");

    std::vector<std::string> outputs = {out};
    if (csv) {
        std::ostringstream ss;
        ss.precision(17);
        ss << "particle,px,py,vx,vy,fx,fy,flux\n";
        for (int p = 0; p < rep.particles; ++p)
            ss << p << "," << rep.positions[static_cast<size_t>(p)][0] << ","
               << rep.positions[static_cast<size_t>(p)][1] << "," << rep.velocities[static_cast<size_t>(p)][0]
               << "," << rep.velocities[static_cast<size_t>(p)][1] << ","
               << rep.field_vectors[static_cast<size_t>(p)][0] << ","
               << rep.field_vectors[static_cast<size_t>(p)][1] << ","
               << rep.per_particle[static_cast<size_t>(p)] << "\n";
        write_text(out + ".csv", ss.str());
        outputs.push_back(out + ".csv");
    }
    std::cout << "total energy rate " << rep.total_rate << " over " << rep.particles << " particles\n";

    json echo = {{"checkpoint", checkpoint}, {"data", data}, {"traj", traj}, {"at_index", at_index},
                 {"config", cfgfile}};
    write_manifest(out, "flux", echo, 0, {checkpoint, data}, outputs, now_seconds() - t0);
    return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
    CLI::App app{"learning generalized Hamiltonian decompositions from trajectory data"};
    app.require_subcommand(1);
    app.fallthrough();  // global options (e.g. --config) may appear after the subcommand
    std::string config_path;
    app.add_option("--config", config_path, "JSON config file (flags take precedence)");

    // generate
    auto* gen = app.add_subcommand("generate", "integrate a benchmark system and write a noisy dataset");
    std::string g_system = "pendulum", g_out, g_csv;
    int g_ics = 2, g_particles = 12;
    double g_duration = 20.0, g_freq = 50.0, g_noise = 0.1;
    long g_samples = 0;
    uint64_t g_seed = 0;
    gen->add_option("--system", g_system, "pendulum | duffing | lorenz63 | nbody");
    gen->add_option("--ics", g_ics, "number of initial conditions");
    gen->add_option("--duration", g_duration, "trajectory length in time units");
    gen->add_option("--freq", g_freq, "sampling frequency in Hz");
    gen->add_option("--samples", g_samples, "total samples per trajectory (alternative to --freq)");
    gen->add_option("--noise", g_noise, "Gaussian noise standard deviation");
    gen->add_option("--seed", g_seed, "RNG seed");
    gen->add_option("--out", g_out, "output dataset JSON path");
    gen->add_option("--csv", g_csv, "also export per-trajectory CSVs with this prefix");
    gen->add_option("--nbody-particles", g_particles, "particle count for the nbody system");

    // train
    auto* tr = app.add_subcommand("train", "fit a model to a dataset");
    TrainCliOpts t;
    tr->add_option("--data", t.data, "training dataset JSON");
    tr->add_option("--val", t.val, "validation dataset JSON (defaults to the training data)");
    tr->add_option("--model", t.model, "ghnn-global|ghnn-local|ghnn-conserved|ghnn-flux|known-h|fcnn|hnn");
    tr->add_option("--loss", t.loss, "weak | deriv | state");
    tr->add_option("--epochs", t.epochs);
    tr->add_option("--batch-size", t.batch_size);
    tr->add_option("--batch-steps", t.batch_steps, "window length in time steps");
    tr->add_option("--k-test", t.k_test, "number of Gaussian test functions");
    tr->add_option("--shape", t.shape, "test function shape parameter");
    tr->add_option("--ensemble", t.ensemble, "independently seeded models to train");
    tr->add_option("--seed", t.seed);
    tr->add_option("--width", t.width, "hidden layer width");
    tr->add_option("--depth", t.depth, "hidden layer count");
    tr->add_option("--lr", t.lr);
    tr->add_option("--weight-decay", t.weight_decay);
    tr->add_option("--epsilon", t.epsilon, "quadratic floor of the stable H parameterizations");
    tr->add_option("--rehu-delta", t.rehu_delta);
    tr->add_option("--init-out-scale", t.init_out_scale, "init scale of the energy nets' output layer");
    tr->add_option("--lambda-flux", t.lambda_flux, "soft energy-flux-rate prior weight");
    tr->add_option("--lambda-curl", t.lambda_curl, "curl penalty weight");
    tr->add_option("--state-substeps", t.state_substeps, "rk4 sub-steps per sample interval (state loss)");
    tr->add_option("--threads", t.threads);
    tr->add_option("--val-every", t.val_every, "validate every N epochs");
    std::string t_out;
    tr->add_option("--out", t_out, "checkpoint output path");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint against the true system");
    std::string e_ckpt, e_system, e_out;
    int e_ics = 50, e_points = 200, e_threads = 1;
    double e_horizon = 200.0;
    uint64_t e_seed = 0;
    bool e_no_state = false;
    ev->add_option("--checkpoint", e_ckpt);
    ev->add_option("--system", e_system, "defaults to the checkpoint's system");
    ev->add_option("--ics", e_ics);
    ev->add_option("--horizon", e_horizon);
    ev->add_option("--points", e_points);
    ev->add_option("--seed", e_seed);
    ev->add_flag("--no-state-error", e_no_state, "skip state error (chaotic systems)");
    ev->add_option("--threads", e_threads);
    ev->add_option("--out", e_out, "metrics report JSON path");

    // compare
    auto* cp = app.add_subcommand("compare", "train one fcnn per loss on the same data and tabulate");
    TrainCliOpts c;
    c.ensemble = 1;
    std::string c_losses = "weak,deriv,state", c_out;
    int c_eval_ics = 50, c_eval_points = 200;
    double c_eval_horizon = 200.0;
    bool c_no_state = false;
    cp->add_option("--data", c.data);
    cp->add_option("--val", c.val);
    cp->add_option("--losses", c_losses, "comma separated subset of weak,deriv,state");
    cp->add_option("--epochs", c.epochs);
    cp->add_option("--batch-size", c.batch_size);
    cp->add_option("--batch-steps", c.batch_steps);
    cp->add_option("--k-test", c.k_test);
    cp->add_option("--shape", c.shape);
    cp->add_option("--ensemble", c.ensemble);
    cp->add_option("--seed", c.seed);
    cp->add_option("--width", c.width);
    cp->add_option("--depth", c.depth);
    cp->add_option("--lr", c.lr);
    cp->add_option("--state-substeps", c.state_substeps);
    cp->add_option("--threads", c.threads);
    cp->add_option("--val-every", c.val_every);
    cp->add_option("--eval-ics", c_eval_ics);
    cp->add_option("--eval-horizon", c_eval_horizon);
    cp->add_option("--eval-points", c_eval_points);
    cp->add_flag("--no-state-error", c_no_state);
    cp->add_option("--out", c_out, "output prefix for report/times/checkpoints");

    // flux
    auto* fl = app.add_subcommand("flux", "per-particle energy flux of a known-h checkpoint at one state");
    std::string f_ckpt, f_data, f_out;
    int f_traj = 0, f_index = 0;
    bool f_csv = false;
    fl->add_option("--checkpoint", f_ckpt);
    fl->add_option("--data", f_data);
    fl->add_option("--traj", f_traj, "trajectory index");
    fl->add_option("--at-index", f_index, "sample index within the trajectory");
    fl->add_flag("--csv", f_csv, "also write a flat CSV");
    fl->add_option("--out", f_out, "flux report JSON path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        const json cfgfile = load_config_file(config_path);
        if (gen->parsed()) {
            overlay(*gen, cfgfile, "--system", "system", g_system);
            overlay(*gen, cfgfile, "--ics", "ics", g_ics);
            overlay(*gen, cfgfile, "--duration", "duration", g_duration);
            overlay(*gen, cfgfile, "--freq", "freq", g_freq);
            overlay(*gen, cfgfile, "--noise", "noise", g_noise);
            overlay(*gen, cfgfile, "--seed", "seed", g_seed);
            overlay(*gen, cfgfile, "--out", "out", g_out);
            return cmd_generate(*gen, cfgfile, g_system, g_ics, g_duration, g_freq, g_samples, g_noise,
                                g_seed, g_out, g_csv, g_particles);
        }
        if (tr->parsed()) {
            overlay(*tr, cfgfile, "--model", "model", t.model);
            overlay(*tr, cfgfile, "--loss", "loss", t.loss);
            overlay(*tr, cfgfile, "--epochs", "epochs", t.epochs);
            overlay(*tr, cfgfile, "--batch-size", "batch_size", t.batch_size);
            overlay(*tr, cfgfile, "--batch-steps", "batch_steps", t.batch_steps);
            overlay(*tr, cfgfile, "--k-test", "k_test", t.k_test);
            overlay(*tr, cfgfile, "--shape", "shape", t.shape);
            overlay(*tr, cfgfile, "--ensemble", "ensemble", t.ensemble);
            overlay(*tr, cfgfile, "--seed", "seed", t.seed);
            overlay(*tr, cfgfile, "--width", "width", t.width);
            overlay(*tr, cfgfile, "--depth", "depth", t.depth);
            overlay(*tr, cfgfile, "--lr", "lr", t.lr);
            overlay(*tr, cfgfile, "--epsilon", "epsilon", t.epsilon);
            overlay(*tr, cfgfile, "--init-out-scale", "init_out_scale", t.init_out_scale);
            overlay(*tr, cfgfile, "--lambda-flux", "lambda_flux", t.lambda_flux);
            t.out = t_out;
            overlay(*tr, cfgfile, "--out", "out", t.out);
            return cmd_train(t, cfgfile);
        }
        if (ev->parsed())
            return cmd_eval(e_ckpt, e_system, e_ics, e_horizon, e_points, e_seed, e_no_state, e_threads,
                            e_out, cfgfile);
        if (cp->parsed()) return cmd_compare(c, c_losses, c_eval_ics, c_eval_horizon, c_eval_points,
                                             c_no_state, c_out, cfgfile);
        if (fl->parsed()) return cmd_flux(f_ckpt, f_data, f_traj, f_index, f_out, f_csv, cfgfile);
        throw_config("no subcommand given");
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
    return 0;
}

}  // namespace ghnn
