#pragma once

#include <string>
#include <vector>

#include "ghnn/decomp.hpp"
#include "ghnn/losses.hpp"
#include "ghnn/systems.hpp"

namespace ghnn {

struct TrainConfig {
    double lr = 1e-3;
    double weight_decay = 1e-4;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int epochs = 300;
    BatchSpec batch;            // batch_size and batch_steps
    LossOptions loss;           // kind, k_test, shape, priors, threads
    int ensemble_count = 3;
    uint64_t seed = 0;
    int val_max_windows = 128;  // validation uses a deterministic window subset
    int val_every = 1;
    bool stability_spot_checks = true;
    /// ReHU-based H parameterizations start with N(x)-N(0) <= 0 on about half
    /// the domain, where the ReHU gradient vanishes and learning stalls. A
    /// short warm start fits the inner net to a quadratic bowl over the data
    /// region first; the stability guarantees are unaffected (they hold for
    /// any weights).
    int warm_start_h_steps = 120;
};

struct AdamState {
    std::vector<double> m, v;
    long step = 0;
};

/// One coupled-L2 Adam update: grad <- grad + wd * theta before the moment
/// updates, then bias-corrected moments drive the step.
void adam_step(std::vector<double>& params, const std::vector<double>& grads, AdamState& st,
               const TrainConfig& cfg);

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double wall_seconds = 0.0;  // volatile; lives in histories only, never in checkpoints
};

struct MemberResult {
    int member = 0;
    uint64_t member_seed = 0;
    bool failed = false;
    std::string fail_reason;
    double best_val = 0.0;
    int best_epoch = -1;
    bool stability_ok = true;  // energy_rate < 0 spot checks (stable variants)
    std::vector<EpochRecord> history;
};

struct TrainResult {
    DecompModel best_model;
    int best_member = -1;
    std::vector<MemberResult> members;
    double wall_seconds = 0.0;
    double final_train_loss = 0.0;
    double best_val_loss = 0.0;
};

/// Trains ensemble_count independently seeded models and returns the one with
/// the lowest validation loss. A member whose loss turns non-finite is
/// recorded as failed, not fatal.
TrainResult train(const ModelConfig& proto, const TrajectoryDataset& train_ds, const TrajectoryDataset& val_ds,
                  const TrainConfig& cfg);

struct CheckpointMeta {
    uint64_t seed = 0;
    int epochs = 0;
    std::string loss_kind;
    std::string system;
    double final_train_loss = 0.0;
    double best_val_loss = 0.0;
};

/// Single-JSON checkpoint; parameters round-trip bit-exactly.
void save_checkpoint(const std::string& path, const DecompModel& model, const CheckpointMeta& meta);
DecompModel load_checkpoint(const std::string& path, CheckpointMeta* meta_out = nullptr);

/// FNV-1a content hash (manifests, reproducibility tests).
uint64_t fnv1a(const std::string& bytes);

}  // namespace ghnn
