#include "ghnn/train.hpp"

#include <algorithm>
#include <chrono>
#include <limits>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ghnn/threading.hpp"

namespace ghnn {

using nlohmann::json;

void adam_step(std::vector<double>& params, const std::vector<double>& grads, AdamState& st,
               const TrainConfig& cfg) {
    if (params.size() != grads.size()) throw_shape("adam: parameter/gradient size mismatch");
    if (st.m.size() != params.size()) {
        st.m.assign(params.size(), 0.0);
        st.v.assign(params.size(), 0.0);
        st.step = 0;
    }
    ++st.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    for (size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i] + cfg.weight_decay * params[i];
        st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
        st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g * g;
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        params[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

namespace {

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

int batches_per_epoch(const TrajectoryDataset& ds, const BatchSpec& spec) {
    const size_t disjoint = enumerate_windows(ds, spec.batch_steps, 0).size();
    return std::max(1, static_cast<int>((disjoint + spec.batch_size - 1) / spec.batch_size));
}

// Pre-fit the GlobalStable inner net to a quadratic bowl over the data region
// so that N(x) - N(0) starts positive almost everywhere (no dead ReHU zone).
void warm_start_h(DecompModel& model, const TrajectoryDataset& ds, const TrainConfig& cfg,
                  std::vector<double>& params) {
    const auto* hp = dynamic_cast<const HParam*>(model.learned_energy());
    if (!hp || hp->variant() != HVariant::GlobalStable || cfg.warm_start_h_steps <= 0) return;

    // deterministic probe states spread over the dataset
    const int want = 256;
    int avail = 0;
    for (const auto& tr : ds.trajectories) avail += tr.states.rows();
    const int m = std::min(want, avail);
    Mat X(m, ds.n);
    const int stride = std::max(1, avail / m);
    int r = 0, seen = 0;
    for (const auto& tr : ds.trajectories)
        for (int i = 0; i < tr.states.rows() && r < m; ++i, ++seen)
            if (seen % stride == 0) {
                for (int c = 0; c < ds.n; ++c) X(r, c) = tr.states(i, c);
                ++r;
            }
    if (r < 2) return;
    Mat Xs(r, ds.n);
    for (int i = 0; i < r; ++i)
        for (int c = 0; c < ds.n; ++c) Xs(i, c) = X(i, c);

    double mean_sq = 0.0;
    for (int i = 0; i < r; ++i) {
        double s = 0.0;
        for (int c = 0; c < ds.n; ++c) s += Xs(i, c) * Xs(i, c);
        mean_sq += s;
    }
    mean_sq = std::max(1e-9, mean_sq / r);
    // a shallow bowl: enough to lift N(x)-N(0) above zero over the data region
    // without committing the energy to a shape the data must then unlearn
    const double scale = 0.4 * hp->rehu_delta() / mean_sq;
    Mat target(r, 1);
    for (int i = 0; i < r; ++i) {
        double s = 0.0;
        for (int c = 0; c < ds.n; ++c) s += Xs(i, c) * Xs(i, c);
        target(i, 0) = scale * s;
    }

    TrainConfig wcfg = cfg;
    wcfg.lr = 3e-3;
    wcfg.weight_decay = 0.0;
    AdamState adam;
    for (int step = 0; step < cfg.warm_start_h_steps; ++step) {
        Tape t;
        Binding bind = Binding::bind(t, model.params());
        Var n = hp->inner().apply(t, bind, t.constant(Xs));
        Var loss = t.smul(t.sum(t.square(t.sub(n, t.constant(target)))), 1.0 / r);
        auto grads = t.backward(loss, bind.vars);
        std::vector<double> flat_grad;
        flat_grad.reserve(params.size());
        for (const Mat& g : grads)
            for (size_t i = 0; i < g.size(); ++i) flat_grad.push_back(g[i]);
        adam_step(params, flat_grad, adam, wcfg);
        model.params().unflatten(params);
    }
}

// Fixed probe states for the stability spot checks: first validation samples.
Mat stability_probes(const TrajectoryDataset& val_ds, int count) {
    const int n = val_ds.n;
    int avail = 0;
    for (const auto& tr : val_ds.trajectories) avail += tr.states.rows();
    const int m = std::min(count, avail);
    Mat X(m, n);
    int r = 0;
    for (const auto& tr : val_ds.trajectories) {
        for (int i = 0; i < tr.states.rows() && r < m; ++i, ++r)
            for (int c = 0; c < n; ++c) X(r, c) = tr.states(i, c);
        if (r >= m) break;
    }
    return X;
}

MemberResult train_member(int member, const ModelConfig& proto, const TrajectoryDataset& train_ds,
                          const TrajectoryDataset& val_ds, const TrainConfig& cfg, int threads,
                          DecompModel& model_out, std::vector<double>& best_params_out) {
    MemberResult res;
    res.member = member;
    res.member_seed = Rng::stream(cfg.seed, static_cast<uint64_t>(member)).next_u64();

    ModelConfig mc = proto;
    mc.seed = res.member_seed;
    DecompModel model = DecompModel::build(mc);

    LossOptions opts = cfg.loss;
    opts.batch_steps = cfg.batch.batch_steps;
    opts.threads = threads;

    const std::vector<Window> val_windows = enumerate_windows(val_ds, cfg.batch.batch_steps, cfg.val_max_windows);
    if (val_windows.empty()) throw_config("train: validation dataset has no admissible window");

    const bool stable_variant = proto.variant == ModelVariant::GhnnGlobalStable ||
                                proto.variant == ModelVariant::GhnnLocalStable;
    const Mat probes = stability_probes(val_ds, 16);

    Rng batch_rng = Rng::stream(cfg.seed ^ 0x5eedbeefULL, static_cast<uint64_t>(member));
    AdamState adam;
    std::vector<double> params = model.params().flatten();
    res.best_val = std::numeric_limits<double>::infinity();
    best_params_out = params;
    model_out = model;

    const int bpe = batches_per_epoch(train_ds, cfg.batch);
    double train_loss = std::numeric_limits<double>::quiet_NaN();

    auto validate = [&](int epoch, double epoch_seconds) {
        LossResult vr = loss_eval(model, val_ds, val_windows, opts, false);
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = train_loss;
        rec.val_loss = vr.value;
        rec.wall_seconds = epoch_seconds;
        res.history.push_back(rec);
        if (std::isfinite(vr.value) && vr.value < res.best_val) {
            res.best_val = vr.value;
            res.best_epoch = epoch;
            best_params_out = params;
        }
        if (stable_variant && cfg.stability_spot_checks) {
            Mat rate = model.energy_rate(probes);
            for (size_t i = 0; i < rate.size(); ++i)
                if (!(rate[i] < 0.0)) res.stability_ok = false;
        }
    };

    try {
        if (cfg.epochs == 0) {
            // initialized model; no history
            return res;
        }
        warm_start_h(model, train_ds, cfg, params);
        adam = AdamState{};
        best_params_out = params;
        for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
            const double t0 = now_seconds();
            for (int b = 0; b < bpe; ++b) {
                const std::vector<Window> windows = sample_batch(train_ds, cfg.batch, batch_rng);
                LossResult lr = loss_eval(model, train_ds, windows, opts, true);
                if (!std::isfinite(lr.value)) {
                    res.failed = true;
                    res.fail_reason = "training loss diverged (non-finite)";
                    return res;
                }
                train_loss = lr.value;
                adam_step(params, lr.grad, adam, cfg);
                model.params().unflatten(params);
            }
            if (epoch % cfg.val_every == 0 || epoch == cfg.epochs) validate(epoch, now_seconds() - t0);
        }
    } catch (const Error& e) {
        res.failed = true;
        res.fail_reason = e.what();
        return res;
    }
    model_out = model;
    return res;
}

}  // namespace

TrainResult train(const ModelConfig& proto, const TrajectoryDataset& train_ds, const TrajectoryDataset& val_ds,
                  const TrainConfig& cfg) {
    if (cfg.ensemble_count < 1) throw_config("train: ensemble_count must be >= 1");
    if (train_ds.n != val_ds.n) throw_config("train: training/validation dimension mismatch");
    if (proto.n != train_ds.n)
        throw_config("train: model dimension " + std::to_string(proto.n) + " does not match data dimension " +
                     std::to_string(train_ds.n));

    const double t0 = now_seconds();
    TrainResult out;
    out.members.resize(static_cast<size_t>(cfg.ensemble_count));
    std::vector<DecompModel> models(static_cast<size_t>(cfg.ensemble_count));
    std::vector<std::vector<double>> best_params(static_cast<size_t>(cfg.ensemble_count));

    const int member_par = std::max(1, std::min(cfg.loss.threads, cfg.ensemble_count));
    const int inner_threads = std::max(1, cfg.loss.threads / member_par);
    parallel_blocks(cfg.ensemble_count, member_par, [&](int m) {
        out.members[static_cast<size_t>(m)] = train_member(m, proto, train_ds, val_ds, cfg, inner_threads,
                                                           models[static_cast<size_t>(m)],
                                                           best_params[static_cast<size_t>(m)]);
    });

    int best = -1;
    double best_val = std::numeric_limits<double>::infinity();
    for (int m = 0; m < cfg.ensemble_count; ++m) {
        const MemberResult& r = out.members[static_cast<size_t>(m)];
        if (r.failed) continue;
        const double v = cfg.epochs == 0 ? 0.0 : r.best_val;
        if (best < 0 || v < best_val) {
            best = m;
            best_val = v;
        }
    }
    if (best < 0) throw_numeric("train: every ensemble member failed");

    out.best_member = best;
    out.best_model = models[static_cast<size_t>(best)];
    if (cfg.epochs > 0) {
        out.best_model.params().unflatten(best_params[static_cast<size_t>(best)]);
        out.best_val_loss = out.members[static_cast<size_t>(best)].best_val;
        const auto& hist = out.members[static_cast<size_t>(best)].history;
        out.final_train_loss = hist.empty() ? 0.0 : hist.back().train_loss;
    }
    out.wall_seconds = now_seconds() - t0;
    return out;
}

// -- checkpoint io --------------------------------------------------------------

namespace {

json config_to_json(const ModelConfig& cfg) {
    json j;
    j["variant"] = model_variant_name(cfg.variant);
    j["n"] = cfg.n;
    j["hidden"] = cfg.hidden;
    j["epsilon"] = cfg.epsilon;
    j["rehu_delta"] = cfg.rehu_delta;
    j["init_out_scale"] = cfg.init_out_scale;
    j["seed"] = cfg.seed;
    if (!cfg.known_h_system.empty()) j["known_h_system"] = cfg.known_h_system;
    return j;
}

ModelConfig config_from_json(const json& j) {
    ModelConfig cfg;
    const auto v = model_variant_from_name(j.at("variant").get<std::string>());
    if (!v) throw_io("checkpoint: unknown model variant");
    cfg.variant = *v;
    cfg.n = j.at("n").get<int>();
    cfg.hidden = j.at("hidden").get<std::vector<int>>();
    cfg.epsilon = j.at("epsilon").get<double>();
    cfg.rehu_delta = j.at("rehu_delta").get<double>();
    cfg.init_out_scale = j.value("init_out_scale", 1.0);
    cfg.seed = j.at("seed").get<uint64_t>();
    cfg.known_h_system = j.value("known_h_system", std::string());
    if (!cfg.known_h_system.empty()) {
        auto sys = AnalyticSystem::from_name(cfg.known_h_system, cfg.n / 4);
        if (!sys) throw_io("checkpoint: unknown known_h_system '" + cfg.known_h_system + "'");
        cfg.known_h_energy = sys->energy_field();
    }
    return cfg;
}

}  // namespace

void save_checkpoint(const std::string& path, const DecompModel& model, const CheckpointMeta& meta) {
    if (model.variant() == ModelVariant::Analytic && !model.config().known_h_system.empty())
        throw_config("checkpoint: analytic models with external energy cannot be serialized");
    json j;
    j["schema_version"] = 1;
    j["model"] = config_to_json(model.config());
    json params = json::object();
    const ParamStore& ps = model.params();
    for (size_t i = 0; i < ps.count(); ++i) {
        const Mat& v = ps.value(static_cast<int>(i));
        json entry;
        entry["rows"] = v.rows();
        entry["cols"] = v.cols();
        std::vector<double> data(v.data(), v.data() + v.size());
        entry["data"] = std::move(data);
        params[ps.name(static_cast<int>(i))] = std::move(entry);
    }
    j["params"] = std::move(params);
    json m;
    m["seed"] = meta.seed;
    m["epochs"] = meta.epochs;
    m["loss"] = meta.loss_kind;
    m["system"] = meta.system;
    m["final_train_loss"] = meta.final_train_loss;
    m["best_val_loss"] = meta.best_val_loss;
    j["meta"] = std::move(m);

    std::ofstream f(path, std::ios::binary);
    if (!f) throw_io("cannot open for writing: " + path);
    f << j.dump() << "\n";
    if (!f) throw_io("write failed: " + path);
}

DecompModel load_checkpoint(const std::string& path, CheckpointMeta* meta_out) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw_io("cannot open checkpoint: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    json j = json::parse(ss.str(), nullptr, false);
    if (j.is_discarded()) throw_io("checkpoint: invalid JSON: " + path);
    try {
        if (j.at("schema_version").get<int>() != 1) throw_io("checkpoint: unsupported schema version");
        ModelConfig cfg = config_from_json(j.at("model"));
        DecompModel model =
            cfg.variant == ModelVariant::Analytic
                ? AnalyticSystem::from_name(j.at("meta").at("system").get<std::string>())->true_model()
                : DecompModel::build(cfg);
        ParamStore& ps = model.params();
        const json& params = j.at("params");
        for (size_t i = 0; i < ps.count(); ++i) {
            const std::string& name = ps.name(static_cast<int>(i));
            if (!params.contains(name)) throw_io("checkpoint: missing parameter '" + name + "'");
            const json& entry = params.at(name);
            Mat& v = ps.value(static_cast<int>(i));
            if (entry.at("rows").get<int>() != v.rows() || entry.at("cols").get<int>() != v.cols())
                throw_io("checkpoint: shape mismatch for parameter '" + name + "'");
            const auto data = entry.at("data").get<std::vector<double>>();
            if (data.size() != v.size()) throw_io("checkpoint: data length mismatch for '" + name + "'");
            for (size_t k = 0; k < data.size(); ++k) v[k] = data[k];
        }
        if (meta_out) {
            const json& m = j.at("meta");
            meta_out->seed = m.at("seed").get<uint64_t>();
            meta_out->epochs = m.at("epochs").get<int>();
            meta_out->loss_kind = m.at("loss").get<std::string>();
            meta_out->system = m.at("system").get<std::string>();
            meta_out->final_train_loss = m.at("final_train_loss").get<double>();
            meta_out->best_val_loss = m.at("best_val_loss").get<double>();
        }
        return model;
    } catch (const json::exception& e) {
        throw_io(std::string("checkpoint: malformed JSON: ") + e.what());
    }
}

uint64_t fnv1a(const std::string& bytes) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace ghnn
