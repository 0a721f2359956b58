#pragma once

#include <cstdint>
#include <vector>

#include "ghnn/decomp.hpp"
#include "ghnn/odeint.hpp"
#include "ghnn/systems.hpp"

namespace ghnn {

/// Gaussian radial test functions sampled on a uniform window grid.
/// psi_k(t) = exp(-gamma (t - c_k)^2), psi_dot analytic; centers evenly spaced
/// over the window including both endpoints.
struct TestBasis {
    int K = 0;
    double gamma = 0.0;
    double dt = 0.0;
    Mat psi;      // K x S
    Mat psi_dot;  // K x S

    static TestBasis gaussian(int K, double gamma, double dt, int samples);
    static TestBasis from_tables(Mat psi, Mat psi_dot, double dt);
};

struct BatchSpec {
    int batch_size = 120;
    int batch_steps = 50;  // window length l; a window holds l+1 samples
    uint64_t seed = 0;
};

struct Window {
    int traj = 0;
    int start = 0;
};

/// batch_size windows, each a contiguous slice of batch_steps+1 samples from a
/// uniformly chosen trajectory and start index.
std::vector<Window> sample_batch(const TrajectoryDataset& ds, const BatchSpec& spec, Rng& rng);

/// Every admissible window enumerated with stride = batch_steps (deterministic,
/// for validation and full-data evaluations), capped at max_windows.
std::vector<Window> enumerate_windows(const TrajectoryDataset& ds, int batch_steps, int max_windows);

enum class LossKind { Weak, Deriv, State };
const char* loss_kind_name(LossKind k);

struct LossOptions {
    LossKind kind = LossKind::Weak;
    int batch_steps = 50;  // window length l used to build the windows
    int k_test = 200;
    double shape_gamma = 10.0;
    IntegrationConfig state_cfg = IntegrationConfig::rk4(0.0, 4);
    double lambda_flux = 0.0;
    const std::vector<std::vector<double>>* hdot_nom = nullptr;  // per traj, per sample
    double lambda_curl = 0.0;
    int threads = 1;
};

struct LossResult {
    double value = 0.0;
    std::vector<double> grad;  // aligned with ParamStore::flatten(); empty if not requested
    bool diverged = false;     // state regression windows that blew up (tabulated, not fatal)
    int diverged_windows = 0;
};

/// Loss and (optionally) its parameter gradient over a set of windows. Window
/// blocks are fixed independently of the thread count, and block results are
/// reduced in order, so values are bit-stable for any `threads`.
LossResult loss_eval(const DecompModel& model, const TrajectoryDataset& ds, const std::vector<Window>& windows,
                     const LossOptions& opts, bool want_grad);

/// Petrov-Galerkin residual matrix (K x n) of one window:
/// r_k = [psi_k x] - integral(psi_dot_k x) - integral(psi_k f(x)), trapezoid rule.
Mat weak_residuals(const DecompModel& model, const TrajectoryDataset& ds, const Window& w,
                   const TestBasis& basis);

double weak_loss(const DecompModel& model, const TrajectoryDataset& ds, const std::vector<Window>& windows,
                 const LossOptions& opts);

/// Central differences inside, second-order one-sided at the ends.
struct DerivativeEstimates {
    std::vector<Mat> dstates;  // aligned with ds.trajectories
};
DerivativeEstimates estimate_derivatives(const TrajectoryDataset& ds);

/// Mean squared error between f(x_j) and finite-difference state derivatives
/// over the whole dataset.
double derivative_loss(const DecompModel& model, const TrajectoryDataset& ds);

double state_loss(const DecompModel& model, const TrajectoryDataset& ds, const std::vector<Window>& windows,
                  int batch_steps, const IntegrationConfig& cfg);

/// lambda * mean_j (energy_rate(x_j) - hdot_nom_j)^2 over window samples.
double flux_prior_penalty(const DecompModel& model, const TrajectoryDataset& ds,
                          const std::vector<Window>& windows, int batch_steps,
                          const std::vector<std::vector<double>>& hdot_nom, double lambda);

/// Nominal energy-flux-rate series evaluated at the measured states from the
/// system's analytic decomposition.
std::vector<std::vector<double>> nominal_rate_series(const AnalyticSystem& sys, const TrajectoryDataset& ds);

}  // namespace ghnn
