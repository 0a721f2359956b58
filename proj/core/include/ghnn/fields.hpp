#pragma once

#include <memory>
#include <string>
#include <vector>

#include "ghnn/rng.hpp"
#include "ghnn/tape.hpp"

namespace ghnn {

/// Multilayer perceptron with softplus hidden activations and a final affine
/// layer. Output dimension is widths.back(); scalar fields use 1, the
/// decomposition module also uses vector outputs (direct vector fields, W(x)).
class Mlp {
public:
    Mlp() = default;
    /// Registers parameters under `prefix` in `ps`. Weights and biases are
    /// initialized uniform with 1/sqrt(fan_in) bounds; `out_scale` shrinks the
    /// final layer's init (0 gives an exactly-zero initial output).
    Mlp(std::vector<int> widths, const std::string& prefix, ParamStore& ps, Rng& rng, double out_scale = 1.0);

    Var apply(Tape& t, const Binding& bind, Var X) const;

    int in_dim() const { return widths_.front(); }
    int out_dim() const { return widths_.back(); }
    const std::vector<int>& widths() const { return widths_; }

private:
    std::vector<int> widths_;
    std::vector<int> w_idx_, b_idx_;
};

/// MLP-backed scalar field.
class MlpField : public ScalarField {
public:
    MlpField() = default;
    MlpField(std::vector<int> widths, const std::string& prefix, ParamStore& ps, Rng& rng, double out_scale = 1.0);

    int dim() const override { return net_.in_dim(); }
    Var apply(Tape& t, const Binding& bind, Var X) const override;
    const Mlp& net() const { return net_; }

private:
    Mlp net_;
};

/// Input-concave scalar field: a fully input-convex network (nonnegative
/// z-path weights via softplus reparameterization, unconstrained input skips,
/// softplus activations) with negated output. Its Hessian is negative
/// semidefinite everywhere, which makes energy rates of the form
/// grad(H)^T Hessian grad(H) nonpositive by construction.
class ConcaveField : public ScalarField {
public:
    ConcaveField() = default;
    ConcaveField(std::vector<int> widths, const std::string& prefix, ParamStore& ps, Rng& rng);

    int dim() const override { return widths_.front(); }
    Var apply(Tape& t, const Binding& bind, Var X) const override;

private:
    std::vector<int> widths_;
    std::vector<int> wx_idx_, bx_idx_;  // input path (first layer + skips)
    std::vector<int> vz_idx_;           // z path, raw (softplus applied on tape)
};

enum class HVariant { GlobalStable, LocalStable, Plain };

const char* h_variant_name(HVariant v);

/// Generalized Hamiltonian parameterizations.
///   GlobalStable: H = ReHU(N(x) - N(0), delta) + eps |x|^2   (positive, coercive, H(0)=0)
///   LocalStable:  H = softplus(N(x)) - softplus(N(0)) + eps |x|^2
///   Plain:        H = N(x)
/// N(0) is recomputed on every evaluation so its parameter dependence is
/// differentiated.
class HParam : public ScalarField {
public:
    HParam() = default;
    HParam(HVariant variant, std::vector<int> widths, const std::string& prefix, ParamStore& ps, Rng& rng,
           double epsilon = 1e-3, double rehu_delta = 1.0, double out_scale = 1.0);

    int dim() const override { return inner_.dim(); }
    Var apply(Tape& t, const Binding& bind, Var X) const override;

    HVariant variant() const { return variant_; }
    double epsilon() const { return epsilon_; }
    double rehu_delta() const { return rehu_delta_; }
    const MlpField& inner() const { return inner_; }

private:
    HVariant variant_ = HVariant::Plain;
    MlpField inner_;
    double epsilon_ = 1e-3;
    double rehu_delta_ = 1.0;
};

/// Row sums of the elementwise square: |x|^2 per batch row, as an m x 1 node.
Var rowwise_sqnorm(Tape& t, Var X);

}  // namespace ghnn
