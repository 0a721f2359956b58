#include "ghnn/fields.hpp"

#include <cmath>

namespace ghnn {

namespace {

Mat uniform_init(int rows, int cols, double bound, Rng& rng) {
    Mat m(rows, cols);
    for (size_t i = 0; i < m.size(); ++i) m[i] = rng.uniform(-bound, bound);
    return m;
}

}  // namespace

Mlp::Mlp(std::vector<int> widths, const std::string& prefix, ParamStore& ps, Rng& rng, double out_scale)
    : widths_(std::move(widths)) {
    if (widths_.size() < 2) throw_config("Mlp: need at least input and output widths");
    const size_t layers = widths_.size() - 1;
    for (size_t l = 0; l < layers; ++l) {
        const int fan_in = widths_[l], fan_out = widths_[l + 1];
        double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        if (l + 1 == layers) bound *= out_scale;
        // Stored input-major (fan_in x fan_out) so batched apply is X * W.
        w_idx_.push_back(ps.add(prefix + ".W" + std::to_string(l), uniform_init(fan_in, fan_out, bound, rng)));
        b_idx_.push_back(ps.add(prefix + ".b" + std::to_string(l), uniform_init(1, fan_out, bound, rng)));
    }
}

Var Mlp::apply(Tape& t, const Binding& bind, Var X) const {
    if (t.cols(X) != in_dim())
        throw_shape("Mlp: input has " + std::to_string(t.cols(X)) + " columns, expected " + std::to_string(in_dim()));
    Var h = X;
    const size_t layers = w_idx_.size();
    for (size_t l = 0; l < layers; ++l) {
        h = t.add_row(t.matmul(h, bind[w_idx_[l]]), bind[b_idx_[l]]);
        if (l + 1 < layers) h = t.softplus(h);
    }
    return h;
}

MlpField::MlpField(std::vector<int> widths, const std::string& prefix, ParamStore& ps, Rng& rng, double out_scale)
    : net_(std::move(widths), prefix, ps, rng, out_scale) {
    if (net_.out_dim() != 1) throw_config("MlpField: output width must be 1");
}

Var MlpField::apply(Tape& t, const Binding& bind, Var X) const { return net_.apply(t, bind, X); }

ConcaveField::ConcaveField(std::vector<int> widths, const std::string& prefix, ParamStore& ps, Rng& rng)
    : widths_(std::move(widths)) {
    if (widths_.size() < 2 || widths_.back() != 1)
        throw_config("ConcaveField: widths must end in a scalar output");
    const int n = widths_.front();
    const size_t layers = widths_.size() - 1;
    for (size_t l = 0; l < layers; ++l) {
        const int fan_out = widths_[l + 1];
        const double xb = 1.0 / std::sqrt(static_cast<double>(n));
        wx_idx_.push_back(ps.add(prefix + ".Wx" + std::to_string(l), uniform_init(n, fan_out, xb, rng)));
        // The positive z-path pushes pre-activations up; shift the biases so
        // hidden units start near the high-curvature region of softplus.
        double bias_shift = 0.0;
        if (l > 0) {
            const int fan_in = widths_[l];
            const double eff = 2.0 / std::sqrt(static_cast<double>(fan_in));
            const double center = std::log(std::expm1(eff));
            Mat v(fan_in, fan_out);
            for (size_t i = 0; i < v.size(); ++i) v[i] = center + rng.uniform(-0.5, 0.5);
            vz_idx_.push_back(ps.add(prefix + ".Vz" + std::to_string(l), std::move(v)));
            bias_shift = -0.7 * eff * static_cast<double>(fan_in);  // softplus(pre) mean is about 0.7
        }
        Mat b(1, fan_out);
        for (size_t i = 0; i < b.size(); ++i) b[i] = bias_shift + rng.uniform(-xb, xb);
        bx_idx_.push_back(ps.add(prefix + ".b" + std::to_string(l), std::move(b)));
    }
}

Var ConcaveField::apply(Tape& t, const Binding& bind, Var X) const {
    if (t.cols(X) != widths_.front())
        throw_shape("ConcaveField: input has " + std::to_string(t.cols(X)) + " columns, expected " +
                    std::to_string(widths_.front()));
    const size_t layers = wx_idx_.size();
    Var z = t.softplus(t.add_row(t.matmul(X, bind[wx_idx_[0]]), bind[bx_idx_[0]]));
    for (size_t l = 1; l < layers; ++l) {
        Var pre = t.add(t.matmul(z, t.softplus(bind[vz_idx_[l - 1]])),
                        t.add_row(t.matmul(X, bind[wx_idx_[l]]), bind[bx_idx_[l]]));
        z = (l + 1 < layers) ? t.softplus(pre) : pre;  // final layer affine
    }
    return t.neg(z);
}

const char* h_variant_name(HVariant v) {
    switch (v) {
        case HVariant::GlobalStable: return "global-stable";
        case HVariant::LocalStable: return "local-stable";
        case HVariant::Plain: return "plain";
    }
    return "?";
}

HParam::HParam(HVariant variant, std::vector<int> widths, const std::string& prefix, ParamStore& ps, Rng& rng,
               double epsilon, double rehu_delta, double out_scale)
    : variant_(variant), inner_(std::move(widths), prefix, ps, rng, out_scale), epsilon_(epsilon),
      rehu_delta_(rehu_delta) {
    if (epsilon_ <= 0.0 && variant_ != HVariant::Plain) throw_config("HParam: epsilon must be positive");
    if (rehu_delta_ <= 0.0) throw_config("HParam: rehu_delta must be positive");
}

Var HParam::apply(Tape& t, const Binding& bind, Var X) const {
    if (variant_ == HVariant::Plain) return inner_.apply(t, bind, X);
    Var n_x = inner_.apply(t, bind, X);
    Var n_0 = inner_.apply(t, bind, t.constant(Mat(1, dim())));
    Var quad = t.smul(rowwise_sqnorm(t, X), epsilon_);
    if (variant_ == HVariant::GlobalStable) {
        return t.add(rehu(t, t.sub(n_x, n_0), rehu_delta_), quad);
    }
    // LocalStable
    return t.add(t.sub(t.softplus(n_x), t.softplus(n_0)), quad);
}

Var rowwise_sqnorm(Tape& t, Var X) {
    return t.matmul(t.square(X), t.constant(Mat::full(t.cols(X), 1, 1.0)));
}

}  // namespace ghnn
