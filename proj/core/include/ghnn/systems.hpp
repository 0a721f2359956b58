#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ghnn/decomp.hpp"
#include "ghnn/odeint.hpp"
#include "ghnn/rng.hpp"
#include "ghnn/tape.hpp"

namespace ghnn {

enum class SystemKind { Pendulum, Duffing, Lorenz63, NBody };

/// Ground-truth benchmark dynamics with (where available) their analytic
/// generalized Hamiltonian decompositions.
class AnalyticSystem {
public:
    static AnalyticSystem make(SystemKind kind, int nbody_particles = 12);
    static std::optional<AnalyticSystem> from_name(const std::string& name, int nbody_particles = 12);
    /// NBody with the non-conservative force field switched off (pure gravity).
    static AnalyticSystem make_nbody(int particles, bool with_force_field);

    SystemKind kind() const { return kind_; }
    const char* name() const;
    int dim() const { return n_; }
    int particles() const { return particles_; }  // NBody only

    /// True vector field. NBody throws on coincident particles.
    void eval(const std::vector<double>& x, std::vector<double>& dx) const;
    OdeFn ode() const;

    double energy(const std::vector<double>& x) const;

    /// Analytic decomposition oracle (pendulum, duffing, lorenz63).
    bool has_decomposition() const { return kind_ != SystemKind::NBody; }
    Mat j_true(const std::vector<double>& x) const;
    Mat r_true(const std::vector<double>& x) const;
    std::vector<double> grad_h_true(const std::vector<double>& x) const;
    /// grad H . R grad H from the analytic decomposition (the nominal
    /// energy-flux-rate series for the soft prior).
    double energy_rate_true(const std::vector<double>& x) const;

    // -- tape builders ---------------------------------------------------------
    Var field_on_tape(Tape& t, Var X) const;
    Var energy_on_tape(Tape& t, Var X) const;
    std::shared_ptr<ScalarField> energy_field() const;

    /// Oracle-backed model (field + energy + analytic R grad H when known).
    DecompModel true_model() const;

    /// Initial condition inside the system's domain of interest.
    std::vector<double> sample_ic(Rng& rng) const;

    /// NBody non-conservative force field at a planar position.
    static void force_field(double px, double py, double& fx, double& fy);

    // Lorenz '63 classical parameters (the paper leaves them symbolic).
    static constexpr double lorenz_sigma = 10.0, lorenz_rho = 28.0, lorenz_beta = 8.0 / 3.0;
    static constexpr double pendulum_g = 9.81;
    static constexpr double damping = 0.35;

private:
    SystemKind kind_ = SystemKind::Pendulum;
    int n_ = 2;
    int particles_ = 0;
    bool force_field_enabled_ = true;
};

struct Trajectory {
    std::vector<double> times;
    Mat states;  // T x n
};

struct TrajectoryDataset {
    int schema_version = 1;
    std::string system;
    int n = 0;
    double noise_sigma = 0.0;
    uint64_t seed = 0;
    double freq = 0.0;
    std::vector<Trajectory> trajectories;

    size_t total_samples() const;
    std::string to_json() const;
    static TrajectoryDataset from_json(const std::string& text);
    void save(const std::string& path) const;
    static TrajectoryDataset load(const std::string& path);
    /// One CSV per trajectory: <prefix>_000.csv with header t,x1..xn.
    void export_csv(const std::string& prefix) const;
};

/// Uniform grid t_i = i / freq, i = 0..round(duration*freq)-1.
std::vector<double> uniform_times(double duration, double freq);

/// Integrates each initial condition at the reference tolerances (rtol 1e-6,
/// atol 1e-12), samples on the uniform grid and adds iid Gaussian noise to
/// every state component. Deterministic under seed (one RNG stream per
/// trajectory). Integrator divergence is propagated as an error.
TrajectoryDataset generate(const AnalyticSystem& sys, const std::vector<std::vector<double>>& ics,
                           double duration, double freq, double noise_sigma, uint64_t seed);

}  // namespace ghnn
