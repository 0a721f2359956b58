#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ghnn/mat.hpp"
#include "ghnn/tape.hpp"

namespace ghnn {

enum class OdeMethod { Rk4, Dopri45 };

struct IntegrationConfig {
    OdeMethod method = OdeMethod::Dopri45;
    double rtol = 1e-6;
    double atol = 1e-12;
    long max_steps = 500000;
    double dt = 0.0;     // rk4 fixed step; <= 0 means one step per grid interval
    int substeps = 1;    // rk4 sub-steps per grid interval when dt <= 0

    static IntegrationConfig paper_dopri() { return IntegrationConfig{}; }
    static IntegrationConfig rk4(double dt_ = 0.0, int substeps_ = 1) {
        IntegrationConfig c;
        c.method = OdeMethod::Rk4;
        c.dt = dt_;
        c.substeps = substeps_;
        return c;
    }
};

/// Autonomous vector field: dxdt = f(x). dxdt is pre-sized to x.size().
using OdeFn = std::function<void(const std::vector<double>&, std::vector<double>&)>;

/// Divergence is an outcome, not a crash: losses and reports tabulate it.
struct IntegrateResult {
    Mat states;  // one row per requested time (valid rows up to divergence)
    bool diverged = false;
    double t_reached = 0.0;
    long steps = 0;
    std::string message;
};

/// Integrate x' = f(x) through the strictly increasing grid `ts`; returns the
/// state at every grid point. dopri45 uses standard Dormand-Prince 5(4)
/// coefficients with PI step control and 4th-order dense output at the
/// requested times; rk4 steps exactly on the grid with sub-stepping.
IntegrateResult integrate(const OdeFn& f, const std::vector<double>& x0, const std::vector<double>& ts,
                          const IntegrationConfig& cfg);

/// Batched vector field on a tape: rows of X evolve independently.
using TapeOdeFn = std::function<Var(Tape&, Var)>;

struct DiffIntegrateResult {
    std::vector<Var> states;  // one m x n node per grid time (first is X0)
    bool diverged = false;
    double t_reached = 0.0;
};

/// Differentiable fixed-step RK4 through the grid: every intermediate lands on
/// the tape, so trajectory/parameter gradients come from Tape::backward.
DiffIntegrateResult integrate_diff(Tape& t, const TapeOdeFn& f, Var X0, const std::vector<double>& ts,
                                   const IntegrationConfig& cfg);

}  // namespace ghnn
