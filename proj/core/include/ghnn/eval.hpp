#pragma once

#include <array>
#include <string>
#include <vector>

#include "ghnn/decomp.hpp"
#include "ghnn/systems.hpp"

namespace ghnn {

struct MetricsReport {
    bool state_error_included = true;  // chaotic systems report derivative error only
    double state_error_mean = 0.0, state_error_std = 0.0;
    double deriv_error_mean = 0.0, deriv_error_std = 0.0;
    double train_time_seconds = -1.0;  // filled by comparison flows; volatile
    bool diverged = false;
    int diverged_ics = 0;
    std::vector<double> per_ic_state_error;  // diverged ICs excluded
    std::vector<double> per_ic_deriv_error;
    std::vector<int> diverged_ic_indices;
};

struct EvalConfig {
    int n_ics = 50;
    double horizon = 200.0;
    int n_pts = 200;  // 1 Hz grid over the default horizon
    uint64_t seed = 0;
    bool include_state_error = true;
    int threads = 1;
    int rk4_substeps = 40;  // model rollout sub-steps per output interval
    // a rollout that leaves this radius has diverged in finite time, whether or
    // not it has overflowed yet
    double divergence_radius = 1e3;
};

/// Integrates true and model trajectories from shared initial conditions and
/// reports mean l2 state- and derivative-errors (mean over time, then
/// mean +/- std over initial conditions). Divergent initial conditions are
/// excluded from the means and counted separately.
MetricsReport evaluate(const DecompModel& model, const AnalyticSystem& sys, const EvalConfig& cfg);

/// Energy-flux breakdown at one state of a particle system with layout
/// (px, py, vx, vy) per particle. The per-particle values sum to the total
/// energy rate exactly.
struct FluxReport {
    int particles = 0;
    double total_rate = 0.0;
    std::vector<double> per_particle;
    std::vector<std::array<double, 2>> positions;
    std::vector<std::array<double, 2>> velocities;
    std::vector<std::array<double, 2>> field_vectors;  // non-conservative force field at positions
};

FluxReport flux_report(const DecompModel& model, const std::vector<double>& x);

}  // namespace ghnn
