#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ghnn/fields.hpp"
#include "ghnn/rng.hpp"
#include "ghnn/tape.hpp"

namespace ghnn {

enum class JVariant { LearnedSkew, CanonicalSymplectic, None };
enum class RVariant { GradPotential, ConcaveHvp, Zero, FromW };

enum class ModelVariant {
    GhnnGlobalStable,  // H positive+coercive (ReHU), R grad H = hessian(N_v) grad H, N_v concave
    GhnnLocalStable,   // H = softplus form, same R
    GhnnConserved,     // R = 0
    GhnnFluxPrior,     // H plain, R grad H = grad N_D (pairs with the soft flux-rate prior)
    KnownH,            // f = W(x) grad H with H given; J,R recovered from W
    Fcnn,              // unstructured vector field
    Hnn,               // canonical symplectic J, R = 0 (even dimension)
    Analytic,          // fixed ground-truth field (oracle/testing)
};

const char* model_variant_name(ModelVariant v);
std::optional<ModelVariant> model_variant_from_name(const std::string& name);

/// Builds a vector field expression from constants only (no parameters).
using TapeFieldFn = std::function<Var(Tape&, Var)>;

/// Fixed ground-truth pieces backing ModelVariant::Analytic.
struct AnalyticParts {
    int n = 0;
    TapeFieldFn field;                     // f(x), m x n
    std::shared_ptr<ScalarField> energy;   // H (optional)
    TapeFieldFn r_grad_h;                  // R(x) grad H(x) (optional), m x n
};

struct ModelConfig {
    ModelVariant variant = ModelVariant::Fcnn;
    int n = 2;
    std::vector<int> hidden = {64, 64};
    double epsilon = 1e-3;
    double rehu_delta = 1.0;
    double init_out_scale = 1.0;  // final-layer init shrink for H/V nets
    uint64_t seed = 0;
    std::string known_h_system;                   // tag stored in checkpoints
    std::shared_ptr<ScalarField> known_h_energy;  // resolved H for KnownH
};

/// An assembled ODE model f(x) = (J(x) + R(x)) grad H(x) (or its special
/// cases). Evaluation is batched: rows of X are independent states.
class DecompModel {
public:
    DecompModel() = default;

    static DecompModel build(const ModelConfig& cfg);
    static DecompModel analytic(AnalyticParts parts);

    ModelVariant variant() const { return cfg_.variant; }
    int dim() const { return cfg_.n; }
    const ModelConfig& config() const { return cfg_; }

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    /// The learned H parameterization, when one exists (null for Fcnn,
    /// KnownH's fixed energy and analytic models).
    const ScalarField* learned_energy() const;

    bool has_energy() const;
    bool has_r_part() const;

    // -- tape-level surfaces (for losses and nested differentiation) ----------
    Var field_on_tape(Tape& t, const Binding& bind, Var X) const;
    Var energy_on_tape(Tape& t, const Binding& bind, Var X) const;
    Var energy_rate_on_tape(Tape& t, const Binding& bind, Var X) const;
    Var flux_on_tape(Tape& t, const Binding& bind, Var X) const;

    /// Mean squared finite-difference curl component over index pairs,
    /// recorded on the tape so it can act as a differentiable penalty.
    Var curl_penalty_on_tape(Tape& t, const Binding& bind, Var X, double fd_h = 1e-3) const;

    // -- numeric conveniences --------------------------------------------------
    Mat eval_field(const Mat& X) const;
    Mat grad_h(const Mat& X) const;
    Mat energy(const Mat& X) const;
    Mat energy_rate(const Mat& X) const;
    Mat flux_per_state(const Mat& X) const;
    Mat j_field(const Mat& X) const;  // J(x) grad H(x) alone
    Mat r_field(const Mat& X) const;  // R(x) grad H(x) alone

    /// Central finite-difference estimate of div(J grad H) at a point.
    double divergence_check(const std::vector<double>& x, double h = 1e-4) const;

    /// Finite-difference antisymmetric Jacobian part of x -> R(x) grad H(x):
    /// C[i][j] = d_j (RgH)_i - d_i (RgH)_j.
    Mat curl_check(const std::vector<double>& x, double h = 1e-4) const;

private:
    struct Parts {
        Var grad_h;  // m x n (invalid for Fcnn/Analytic)
        Var j_part;  // m x n or invalid
        Var r_part;  // m x n or invalid
        Var field;   // m x n
    };
    Parts parts_on_tape(Tape& t, const Binding& bind, Var X, bool need_field) const;
    Var grad_h_on_tape(Tape& t, const Binding& bind, Var X) const;

    ModelConfig cfg_;
    ParamStore params_;

    std::shared_ptr<ScalarField> h_;        // HParam or analytic energy
    std::shared_ptr<ConcaveField> nv_;      // ConcaveHvp
    std::shared_ptr<MlpField> nd_;          // GradPotential
    std::shared_ptr<Mlp> wnet_;             // KnownH W(x), n^2 outputs
    std::shared_ptr<Mlp> fcnn_;             // direct field
    JVariant j_variant_ = JVariant::None;
    RVariant r_variant_ = RVariant::Zero;
    std::vector<std::shared_ptr<Mlp>> j_nets_;  // strict upper triangle, row-major pair order
    std::vector<int> j_const_idx_;              // n==2 degenerate constants
    AnalyticParts analytic_;
};

// Free finite-difference probes shared by the model methods and tests.
double fd_divergence(const std::function<Mat(const Mat&)>& field, const std::vector<double>& x, double h);
Mat fd_antisym_jacobian(const std::function<Mat(const Mat&)>& field, const std::vector<double>& x, double h);

}  // namespace ghnn
