#include "ghnn/tape.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace ghnn {

const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Const: return "const";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Neg: return "neg";
        case Op::Mul: return "mul";
        case Op::SMul: return "smul";
        case Op::MatMul: return "matmul";
        case Op::Transpose: return "transpose";
        case Op::Dot: return "dot";
        case Op::Sum: return "sum";
        case Op::SumRows: return "sum_rows";
        case Op::AddRow: return "add_row";
        case Op::RepeatRows: return "repeat_rows";
        case Op::Sin: return "sin";
        case Op::Cos: return "cos";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Tanh: return "tanh";
        case Op::Softplus: return "softplus";
        case Op::Sigmoid: return "sigmoid";
        case Op::Square: return "square";
        case Op::Pow: return "pow";
        case Op::MaxE: return "max";
        case Op::MaxC: return "maxc";
        case Op::MinC: return "minc";
        case Op::Concat: return "concat";
        case Op::SliceCols: return "slice_cols";
        case Op::ConcatRows: return "concat_rows";
        case Op::SliceRows: return "slice_rows";
        case Op::RowMatVec: return "row_matvec";
        case Op::RowMatVecT: return "row_matvec_t";
        case Op::RowOuter: return "row_outer";
        case Op::RowTranspose: return "row_transpose";
    }
    return "?";
}

Var Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

const Tape::Node& Tape::node(Var v) const {
    check_on_tape(v, "node");
    return nodes_[static_cast<size_t>(v.id)];
}

void Tape::check_on_tape(Var v, const char* what) const {
    if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size())
        throw_shape(std::string(what) + ": node id " + std::to_string(v.id) + " is not on this tape");
}

Var Tape::leaf(Mat v) {
    Node n;
    n.op = Op::Leaf;
    n.val = std::move(v);
    return push(std::move(n));
}

Var Tape::constant(Mat v) {
    Node n;
    n.op = Op::Const;
    n.val = std::move(v);
    return push(std::move(n));
}

namespace {

// Shapes equal, or one side 1x1 (broadcast-by-scalar).
void check_elementwise(const Mat& a, const Mat& b, Op op) {
    if (a.same_shape(b) || a.is_scalar() || b.is_scalar()) return;
    throw_shape(std::string(op_name(op)) + ": shape mismatch (" + a.shape_str() + " vs " + b.shape_str() + ")");
}

const Mat& bigger(const Mat& a, const Mat& b) { return a.is_scalar() && !b.is_scalar() ? b : a; }

}  // namespace

Var Tape::add(Var a, Var b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    check_elementwise(A, B, Op::Add);
    Node n{Op::Add, a.id, b.id};
    const Mat& big = bigger(A, B);
    n.val = Mat(big.rows(), big.cols());
    if (A.is_scalar() && !B.is_scalar()) {
        for (size_t i = 0; i < B.size(); ++i) n.val[i] = A[0] + B[i];
    } else if (B.is_scalar() && !A.is_scalar()) {
        for (size_t i = 0; i < A.size(); ++i) n.val[i] = A[i] + B[0];
    } else {
        for (size_t i = 0; i < A.size(); ++i) n.val[i] = A[i] + B[i];
    }
    return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    check_elementwise(A, B, Op::Sub);
    Node n{Op::Sub, a.id, b.id};
    const Mat& big = bigger(A, B);
    n.val = Mat(big.rows(), big.cols());
    if (A.is_scalar() && !B.is_scalar()) {
        for (size_t i = 0; i < B.size(); ++i) n.val[i] = A[0] - B[i];
    } else if (B.is_scalar() && !A.is_scalar()) {
        for (size_t i = 0; i < A.size(); ++i) n.val[i] = A[i] - B[0];
    } else {
        for (size_t i = 0; i < A.size(); ++i) n.val[i] = A[i] - B[i];
    }
    return push(std::move(n));
}

Var Tape::neg(Var a) {
    const Mat& A = val(a);
    Node n{Op::Neg, a.id};
    n.val = Mat(A.rows(), A.cols());
    for (size_t i = 0; i < A.size(); ++i) n.val[i] = -A[i];
    return push(std::move(n));
}

Var Tape::mul(Var a, Var b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    check_elementwise(A, B, Op::Mul);
    Node n{Op::Mul, a.id, b.id};
    const Mat& big = bigger(A, B);
    n.val = Mat(big.rows(), big.cols());
    if (A.is_scalar() && !B.is_scalar()) {
        for (size_t i = 0; i < B.size(); ++i) n.val[i] = A[0] * B[i];
    } else if (B.is_scalar() && !A.is_scalar()) {
        for (size_t i = 0; i < A.size(); ++i) n.val[i] = A[i] * B[0];
    } else {
        for (size_t i = 0; i < A.size(); ++i) n.val[i] = A[i] * B[i];
    }
    return push(std::move(n));
}

Var Tape::smul(Var a, double c) {
    const Mat& A = val(a);
    Node n{Op::SMul, a.id};
    n.c = c;
    n.val = Mat(A.rows(), A.cols());
    for (size_t i = 0; i < A.size(); ++i) n.val[i] = c * A[i];
    return push(std::move(n));
}

Var Tape::matmul(Var a, Var b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    if (A.cols() != B.rows())
        throw_shape("matmul: inner dimensions mismatch (" + A.shape_str() + " vs " + B.shape_str() + ")");
    Node n{Op::MatMul, a.id, b.id};
    n.val = Mat(A.rows(), B.cols());
    kernels::matmul(A, B, n.val);
    return push(std::move(n));
}

Var Tape::matvec(Var a, Var b) {
    const Mat& B = val(b);
    if (B.cols() != 1)
        throw_shape("matvec: right operand must be a column vector, got " + B.shape_str());
    return matmul(a, b);
}

Var Tape::transpose(Var a) {
    Node n{Op::Transpose, a.id};
    n.val = kernels::transpose(val(a));
    return push(std::move(n));
}

Var Tape::dot(Var a, Var b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    if (!A.same_shape(B))
        throw_shape("dot: shape mismatch (" + A.shape_str() + " vs " + B.shape_str() + ")");
    Node n{Op::Dot, a.id, b.id};
    n.val = Mat::scalar(kernels::dot(A, B));
    return push(std::move(n));
}

Var Tape::sum(Var a) {
    const Mat& A = val(a);
    double s = 0.0;
    for (size_t i = 0; i < A.size(); ++i) s += A[i];
    Node n{Op::Sum, a.id};
    n.val = Mat::scalar(s);
    return push(std::move(n));
}

Var Tape::sum_rows(Var a) {
    const Mat& A = val(a);
    Node n{Op::SumRows, a.id};
    n.val = Mat(1, A.cols());
    for (int r = 0; r < A.rows(); ++r)
        for (int c = 0; c < A.cols(); ++c) n.val(0, c) += A(r, c);
    return push(std::move(n));
}

Var Tape::add_row(Var X, Var r) {
    const Mat& A = val(X);
    const Mat& R = val(r);
    if (R.rows() != 1 || R.cols() != A.cols())
        throw_shape("add_row: expected 1x" + std::to_string(A.cols()) + " row, got " + R.shape_str());
    Node n{Op::AddRow, X.id, r.id};
    n.val = Mat(A.rows(), A.cols());
    for (int i = 0; i < A.rows(); ++i)
        for (int j = 0; j < A.cols(); ++j) n.val(i, j) = A(i, j) + R(0, j);
    return push(std::move(n));
}

Var Tape::repeat_rows(Var r, int m) {
    const Mat& R = val(r);
    if (R.rows() != 1) throw_shape("repeat_rows: expected a 1xN row, got " + R.shape_str());
    Node n{Op::RepeatRows, r.id};
    n.i0 = m;
    n.val = Mat(m, R.cols());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < R.cols(); ++j) n.val(i, j) = R(0, j);
    return push(std::move(n));
}

#define GHNN_UNARY(NAME, OPK, EXPR)                          \
    Var Tape::NAME(Var a) {                                  \
        const Mat& A = val(a);                               \
        Node n{OPK, a.id};                                   \
        n.val = Mat(A.rows(), A.cols());                     \
        for (size_t i = 0; i < A.size(); ++i) {              \
            const double x = A[i];                           \
            (void)x;                                         \
            n.val[i] = (EXPR);                               \
        }                                                    \
        return push(std::move(n));                           \
    }

GHNN_UNARY(sin, Op::Sin, std::sin(x))
GHNN_UNARY(cos, Op::Cos, std::cos(x))
GHNN_UNARY(exp, Op::Exp, std::exp(x))
GHNN_UNARY(log, Op::Log, std::log(x))
GHNN_UNARY(tanh, Op::Tanh, std::tanh(x))
GHNN_UNARY(softplus, Op::Softplus, softplus_stable(x))
GHNN_UNARY(sigmoid, Op::Sigmoid, sigmoid_stable(x))
GHNN_UNARY(square, Op::Square, x * x)
#undef GHNN_UNARY

Var Tape::pow(Var a, double p) {
    const Mat& A = val(a);
    Node n{Op::Pow, a.id};
    n.c = p;
    n.val = Mat(A.rows(), A.cols());
    for (size_t i = 0; i < A.size(); ++i) n.val[i] = std::pow(A[i], p);
    return push(std::move(n));
}

Var Tape::maxe(Var a, Var b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    check_elementwise(A, B, Op::MaxE);
    Node n{Op::MaxE, a.id, b.id};
    const Mat& big = bigger(A, B);
    n.val = Mat(big.rows(), big.cols());
    if (A.is_scalar() && !B.is_scalar()) {
        for (size_t i = 0; i < B.size(); ++i) n.val[i] = std::max(A[0], B[i]);
    } else if (B.is_scalar() && !A.is_scalar()) {
        for (size_t i = 0; i < A.size(); ++i) n.val[i] = std::max(A[i], B[0]);
    } else {
        for (size_t i = 0; i < A.size(); ++i) n.val[i] = std::max(A[i], B[i]);
    }
    return push(std::move(n));
}

Var Tape::maxc(Var a, double c) {
    const Mat& A = val(a);
    Node n{Op::MaxC, a.id};
    n.c = c;
    n.val = Mat(A.rows(), A.cols());
    for (size_t i = 0; i < A.size(); ++i) n.val[i] = std::max(A[i], c);
    return push(std::move(n));
}

Var Tape::minc(Var a, double c) {
    const Mat& A = val(a);
    Node n{Op::MinC, a.id};
    n.c = c;
    n.val = Mat(A.rows(), A.cols());
    for (size_t i = 0; i < A.size(); ++i) n.val[i] = std::min(A[i], c);
    return push(std::move(n));
}

Var Tape::concat(Var a, Var b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    if (A.rows() != B.rows())
        throw_shape("concat: row counts differ (" + A.shape_str() + " vs " + B.shape_str() + ")");
    Node n{Op::Concat, a.id, b.id};
    n.i0 = A.cols();
    n.val = Mat(A.rows(), A.cols() + B.cols());
    for (int i = 0; i < A.rows(); ++i) {
        for (int j = 0; j < A.cols(); ++j) n.val(i, j) = A(i, j);
        for (int j = 0; j < B.cols(); ++j) n.val(i, A.cols() + j) = B(i, j);
    }
    return push(std::move(n));
}

Var Tape::slice_cols(Var a, int c0, int c1) {
    const Mat& A = val(a);
    if (c0 < 0 || c1 > A.cols() || c0 >= c1)
        throw_shape("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) + ") invalid for " +
                    A.shape_str());
    Node n{Op::SliceCols, a.id};
    n.i0 = c0;
    n.i1 = c1;
    n.val = Mat(A.rows(), c1 - c0);
    for (int i = 0; i < A.rows(); ++i)
        for (int j = c0; j < c1; ++j) n.val(i, j - c0) = A(i, j);
    return push(std::move(n));
}

Var Tape::concat_rows(Var a, Var b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    if (A.cols() != B.cols())
        throw_shape("concat_rows: column counts differ (" + A.shape_str() + " vs " + B.shape_str() + ")");
    Node n{Op::ConcatRows, a.id, b.id};
    n.i0 = A.rows();
    n.val = Mat(A.rows() + B.rows(), A.cols());
    for (size_t i = 0; i < A.size(); ++i) n.val[i] = A[i];
    for (size_t i = 0; i < B.size(); ++i) n.val[A.size() + i] = B[i];
    return push(std::move(n));
}

Var Tape::slice_rows(Var a, int r0, int r1) {
    const Mat& A = val(a);
    if (r0 < 0 || r1 > A.rows() || r0 >= r1)
        throw_shape("slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r1) + ") invalid for " +
                    A.shape_str());
    Node n{Op::SliceRows, a.id};
    n.i0 = r0;
    n.i1 = r1;
    n.val = Mat(r1 - r0, A.cols());
    const size_t off = static_cast<size_t>(r0) * A.cols();
    for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = A[off + i];
    return push(std::move(n));
}

namespace {
int row_op_dim(const Mat& W, const Mat& v, const char* what) {
    const int n = v.cols();
    if (W.rows() != v.rows() || W.cols() != n * n)
        throw_shape(std::string(what) + ": expected " + std::to_string(v.rows()) + "x" + std::to_string(n * n) +
                    " flat matrices against " + v.shape_str() + ", got " + W.shape_str());
    return n;
}
}  // namespace

Var Tape::row_matvec(Var Wflat, Var v) {
    const Mat& W = val(Wflat);
    const Mat& V = val(v);
    const int n = row_op_dim(W, V, "row_matvec");
    Node nd{Op::RowMatVec, Wflat.id, v.id};
    nd.i1 = n;
    nd.val = Mat(V.rows(), n);
    for (int r = 0; r < V.rows(); ++r)
        for (int i = 0; i < n; ++i) {
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += W(r, i * n + j) * V(r, j);
            nd.val(r, i) = s;
        }
    return push(std::move(nd));
}

Var Tape::row_matvec_t(Var Wflat, Var v) {
    const Mat& W = val(Wflat);
    const Mat& V = val(v);
    const int n = row_op_dim(W, V, "row_matvec_t");
    Node nd{Op::RowMatVecT, Wflat.id, v.id};
    nd.i1 = n;
    nd.val = Mat(V.rows(), n);
    for (int r = 0; r < V.rows(); ++r)
        for (int i = 0; i < n; ++i) {
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += W(r, j * n + i) * V(r, j);
            nd.val(r, i) = s;
        }
    return push(std::move(nd));
}

Var Tape::row_outer(Var a, Var b) {
    const Mat& A = val(a);
    const Mat& B = val(b);
    if (!A.same_shape(B))
        throw_shape("row_outer: shape mismatch (" + A.shape_str() + " vs " + B.shape_str() + ")");
    const int n = A.cols();
    Node nd{Op::RowOuter, a.id, b.id};
    nd.i1 = n;
    nd.val = Mat(A.rows(), n * n);
    for (int r = 0; r < A.rows(); ++r)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) nd.val(r, i * n + j) = A(r, i) * B(r, j);
    return push(std::move(nd));
}

Var Tape::row_transpose(Var Wflat, int n) {
    const Mat& W = val(Wflat);
    if (W.cols() != n * n)
        throw_shape("row_transpose: expected Mx" + std::to_string(n * n) + ", got " + W.shape_str());
    Node nd{Op::RowTranspose, Wflat.id};
    nd.i1 = n;
    nd.val = Mat(W.rows(), n * n);
    for (int r = 0; r < W.rows(); ++r)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) nd.val(r, i * n + j) = W(r, j * n + i);
    return push(std::move(nd));
}

// -- numeric backward -----------------------------------------------------------

namespace {

void acc_init(Mat& adj, const Mat& like) {
    if (adj.empty()) adj = Mat(like.rows(), like.cols());
}

// adj_operand += g, collapsing to 1x1 when the operand was scalar-broadcast.
void acc_full_or_scalar(Mat& adj, const Mat& operand_val, const Mat& g, double sign = 1.0) {
    acc_init(adj, operand_val);
    if (operand_val.is_scalar() && !g.is_scalar()) {
        double s = 0.0;
        for (size_t i = 0; i < g.size(); ++i) s += g[i];
        adj[0] += sign * s;
    } else {
        for (size_t i = 0; i < g.size(); ++i) adj[i] += sign * g[i];
    }
}

// adj_a += g * factor(b) with scalar broadcasting on either side.
void acc_mul(Mat& adj, const Mat& a_val, const Mat& g, const Mat& f_val) {
    acc_init(adj, a_val);
    if (a_val.is_scalar() && !g.is_scalar()) {
        double s = 0.0;
        for (size_t i = 0; i < g.size(); ++i) s += g[i] * (f_val.is_scalar() ? f_val[0] : f_val[i]);
        adj[0] += s;
    } else if (f_val.is_scalar()) {
        for (size_t i = 0; i < g.size(); ++i) adj[i] += g[i] * f_val[0];
    } else {
        for (size_t i = 0; i < g.size(); ++i) adj[i] += g[i] * f_val[i];
    }
}

}  // namespace

std::vector<Mat> Tape::backward(Var root, const std::vector<Var>& wrt) {
    check_on_tape(root, "backward");
    const Mat& rv = val(root);
    if (!rv.is_scalar())
        throw_shape("backward: root must be scalar-shaped, got " + rv.shape_str());
    for (Var w : wrt) check_on_tape(w, "backward wrt");

    std::vector<Mat> adj(static_cast<size_t>(root.id) + 1);
    adj[static_cast<size_t>(root.id)] = Mat::scalar(1.0);

    std::unordered_set<int32_t> keep;
    for (Var w : wrt) keep.insert(w.id);

    // Only nodes that can reach a wrt target need adjoints.
    std::vector<uint8_t> reach(static_cast<size_t>(root.id) + 1, 0);
    for (Var w : wrt)
        if (w.id <= root.id) reach[static_cast<size_t>(w.id)] = 1;
    for (int32_t id = 0; id <= root.id; ++id) {
        if (reach[static_cast<size_t>(id)]) continue;
        const Node& n = nodes_[static_cast<size_t>(id)];
        if ((n.a >= 0 && reach[static_cast<size_t>(n.a)]) || (n.b >= 0 && reach[static_cast<size_t>(n.b)]))
            reach[static_cast<size_t>(id)] = 1;
    }

    for (int32_t id = root.id; id >= 0; --id) {
        Mat& g = adj[static_cast<size_t>(id)];
        if (g.empty()) continue;
        if (!reach[static_cast<size_t>(id)]) {
            g = Mat();
            continue;
        }
        const Node& n = nodes_[static_cast<size_t>(id)];
        const bool wa = n.a >= 0 && reach[static_cast<size_t>(n.a)];
        const bool wb = n.b >= 0 && reach[static_cast<size_t>(n.b)];
        const auto A = [&]() -> const Mat& { return nodes_[static_cast<size_t>(n.a)].val; };
        const auto B = [&]() -> const Mat& { return nodes_[static_cast<size_t>(n.b)].val; };
        auto adj_a = [&]() -> Mat& { return adj[static_cast<size_t>(n.a)]; };
        auto adj_b = [&]() -> Mat& { return adj[static_cast<size_t>(n.b)]; };

        switch (n.op) {
            case Op::Leaf:
            case Op::Const: break;
            case Op::Add:
                if (wa) acc_full_or_scalar(adj_a(), A(), g);
                if (wb) acc_full_or_scalar(adj_b(), B(), g);
                break;
            case Op::Sub:
                if (wa) acc_full_or_scalar(adj_a(), A(), g);
                if (wb) acc_full_or_scalar(adj_b(), B(), g, -1.0);
                break;
            case Op::Neg:
                if (wa) acc_full_or_scalar(adj_a(), A(), g, -1.0);
                break;
            case Op::Mul:
                if (wa) acc_mul(adj_a(), A(), g, B());
                if (wb) acc_mul(adj_b(), B(), g, A());
                break;
            case Op::SMul: {
                if (!wa) break;
                acc_init(adj_a(), A());
                for (size_t i = 0; i < g.size(); ++i) adj_a()[i] += n.c * g[i];
                break;
            }
            case Op::MatMul: {
                if (wa) {
                    acc_init(adj_a(), A());
                    kernels::matmul_nt_acc(g, B(), adj_a());  // gA += g B^T
                }
                if (wb) {
                    acc_init(adj_b(), B());
                    kernels::matmul_tn_acc(A(), g, adj_b());  // gB += A^T g
                }
                break;
            }
            case Op::Transpose: {
                if (!wa) break;
                acc_init(adj_a(), A());
                for (int i = 0; i < g.rows(); ++i)
                    for (int j = 0; j < g.cols(); ++j) adj_a()(j, i) += g(i, j);
                break;
            }
            case Op::Dot: {
                const double gs = g[0];
                if (wa) {
                    acc_init(adj_a(), A());
                    kernels::axpy(gs, B(), adj_a());
                }
                if (wb) {
                    acc_init(adj_b(), B());
                    kernels::axpy(gs, A(), adj_b());
                }
                break;
            }
            case Op::Sum: {
                if (!wa) break;
                acc_init(adj_a(), A());
                const double gs = g[0];
                for (size_t i = 0; i < adj_a().size(); ++i) adj_a()[i] += gs;
                break;
            }
            case Op::SumRows: {
                if (!wa) break;
                acc_init(adj_a(), A());
                Mat& ga = adj_a();
                for (int i = 0; i < ga.rows(); ++i)
                    for (int j = 0; j < ga.cols(); ++j) ga(i, j) += g(0, j);
                break;
            }
            case Op::AddRow: {
                if (wa) {
                    acc_init(adj_a(), A());
                    kernels::axpy(1.0, g, adj_a());
                }
                if (wb) {
                    acc_init(adj_b(), B());
                    Mat& gb = adj_b();
                    for (int i = 0; i < g.rows(); ++i)
                        for (int j = 0; j < g.cols(); ++j) gb(0, j) += g(i, j);
                }
                break;
            }
            case Op::RepeatRows: {
                if (!wa) break;
                acc_init(adj_a(), A());
                Mat& ga = adj_a();
                for (int i = 0; i < g.rows(); ++i)
                    for (int j = 0; j < g.cols(); ++j) ga(0, j) += g(i, j);
                break;
            }
            case Op::Sin: {
                if (!wa) break;
                acc_init(adj_a(), A());
                const Mat& av = A();
                for (size_t i = 0; i < g.size(); ++i) adj_a()[i] += g[i] * std::cos(av[i]);
                break;
            }
            case Op::Cos: {
                if (!wa) break;
                acc_init(adj_a(), A());
                const Mat& av = A();
                for (size_t i = 0; i < g.size(); ++i) adj_a()[i] -= g[i] * std::sin(av[i]);
                break;
            }
            case Op::Exp: {
                if (!wa) break;
                acc_init(adj_a(), A());
                for (size_t i = 0; i < g.size(); ++i) adj_a()[i] += g[i] * n.val[i];
                break;
            }
            case Op::Log: {
                if (!wa) break;
                acc_init(adj_a(), A());
                const Mat& av = A();
                for (size_t i = 0; i < g.size(); ++i) adj_a()[i] += g[i] / av[i];
                break;
            }
            case Op::Tanh: {
                if (!wa) break;
                acc_init(adj_a(), A());
                for (size_t i = 0; i < g.size(); ++i) adj_a()[i] += g[i] * (1.0 - n.val[i] * n.val[i]);
                break;
            }
            case Op::Softplus: {
                if (!wa) break;
                acc_init(adj_a(), A());
                const Mat& av = A();
                for (size_t i = 0; i < g.size(); ++i) adj_a()[i] += g[i] * sigmoid_stable(av[i]);
                break;
            }
            case Op::Sigmoid: {
                if (!wa) break;
                acc_init(adj_a(), A());
                for (size_t i = 0; i < g.size(); ++i) adj_a()[i] += g[i] * n.val[i] * (1.0 - n.val[i]);
                break;
            }
            case Op::Square: {
                if (!wa) break;
                acc_init(adj_a(), A());
                const Mat& av = A();
                for (size_t i = 0; i < g.size(); ++i) adj_a()[i] += 2.0 * g[i] * av[i];
                break;
            }
            case Op::Pow: {
                if (!wa) break;
                acc_init(adj_a(), A());
                const Mat& av = A();
                for (size_t i = 0; i < g.size(); ++i) adj_a()[i] += n.c * g[i] * std::pow(av[i], n.c - 1.0);
                break;
            }
            case Op::MaxE: {
                const Mat& av = A();
                const Mat& bv = B();
                if (wa) acc_init(adj_a(), av);
                if (wb) acc_init(adj_b(), bv);
                for (size_t i = 0; i < g.size(); ++i) {
                    const double ai = av.is_scalar() ? av[0] : av[i];
                    const double bi = bv.is_scalar() ? bv[0] : bv[i];
                    if (ai > bi) {
                        if (wa) adj_a()[av.is_scalar() ? 0 : i] += g[i];
                    } else {
                        if (wb) adj_b()[bv.is_scalar() ? 0 : i] += g[i];
                    }
                }
                break;
            }
            case Op::MaxC: {
                if (!wa) break;
                acc_init(adj_a(), A());
                const Mat& av = A();
                for (size_t i = 0; i < g.size(); ++i)
                    if (av[i] > n.c) adj_a()[i] += g[i];
                break;
            }
            case Op::MinC: {
                if (!wa) break;
                acc_init(adj_a(), A());
                const Mat& av = A();
                for (size_t i = 0; i < g.size(); ++i)
                    if (av[i] <= n.c) adj_a()[i] += g[i];
                break;
            }
            case Op::Concat: {
                const int k1 = n.i0;
                if (wa) {
                    acc_init(adj_a(), A());
                    for (int i = 0; i < g.rows(); ++i)
                        for (int j = 0; j < k1; ++j) adj_a()(i, j) += g(i, j);
                }
                if (wb) {
                    acc_init(adj_b(), B());
                    for (int i = 0; i < g.rows(); ++i)
                        for (int j = k1; j < g.cols(); ++j) adj_b()(i, j - k1) += g(i, j);
                }
                break;
            }
            case Op::SliceCols: {
                if (!wa) break;
                acc_init(adj_a(), A());
                for (int i = 0; i < g.rows(); ++i)
                    for (int j = 0; j < g.cols(); ++j) adj_a()(i, n.i0 + j) += g(i, j);
                break;
            }
            case Op::ConcatRows: {
                const size_t asz = A().size();
                if (wa) {
                    acc_init(adj_a(), A());
                    for (size_t i = 0; i < asz; ++i) adj_a()[i] += g[i];
                }
                if (wb) {
                    acc_init(adj_b(), B());
                    for (size_t i = 0; i < B().size(); ++i) adj_b()[i] += g[asz + i];
                }
                break;
            }
            case Op::SliceRows: {
                if (!wa) break;
                acc_init(adj_a(), A());
                const size_t off = static_cast<size_t>(n.i0) * A().cols();
                for (size_t i = 0; i < g.size(); ++i) adj_a()[off + i] += g[i];
                break;
            }
            case Op::RowMatVec: {
                const Mat& W = A();
                const Mat& v = B();
                if (wa) acc_init(adj_a(), W);
                if (wb) acc_init(adj_b(), v);
                const int nn = n.i1;
                for (int r = 0; r < g.rows(); ++r)
                    for (int i = 0; i < nn; ++i) {
                        const double gi = g(r, i);
                        if (gi == 0.0) continue;
                        for (int j = 0; j < nn; ++j) {
                            if (wa) adj_a()(r, i * nn + j) += gi * v(r, j);
                            if (wb) adj_b()(r, j) += gi * W(r, i * nn + j);
                        }
                    }
                break;
            }
            case Op::RowMatVecT: {
                const Mat& W = A();
                const Mat& v = B();
                if (wa) acc_init(adj_a(), W);
                if (wb) acc_init(adj_b(), v);
                const int nn = n.i1;
                for (int r = 0; r < g.rows(); ++r)
                    for (int i = 0; i < nn; ++i) {
                        const double gi = g(r, i);
                        if (gi == 0.0) continue;
                        for (int j = 0; j < nn; ++j) {
                            if (wa) adj_a()(r, j * nn + i) += gi * v(r, j);
                            if (wb) adj_b()(r, j) += gi * W(r, j * nn + i);
                        }
                    }
                break;
            }
            case Op::RowOuter: {
                const Mat& av = A();
                const Mat& bv = B();
                if (wa) acc_init(adj_a(), av);
                if (wb) acc_init(adj_b(), bv);
                const int nn = n.i1;
                for (int r = 0; r < av.rows(); ++r)
                    for (int i = 0; i < nn; ++i)
                        for (int j = 0; j < nn; ++j) {
                            const double gij = g(r, i * nn + j);
                            if (wa) adj_a()(r, i) += gij * bv(r, j);
                            if (wb) adj_b()(r, j) += gij * av(r, i);
                        }
                break;
            }
            case Op::RowTranspose: {
                if (!wa) break;
                acc_init(adj_a(), A());
                const int nn = n.i1;
                for (int r = 0; r < g.rows(); ++r)
                    for (int i = 0; i < nn; ++i)
                        for (int j = 0; j < nn; ++j) adj_a()(r, j * nn + i) += g(r, i * nn + j);
                break;
            }
        }
        // Free the adjoint as soon as this node has been consumed.
        if (!keep.count(id)) g = Mat();
    }

    std::vector<Mat> out;
    out.reserve(wrt.size());
    for (Var w : wrt) {
        if (w.id > root.id) {  // recorded after the root: no dependence
            out.push_back(Mat(val(w).rows(), val(w).cols()));
            continue;
        }
        Mat& g = adj[static_cast<size_t>(w.id)];
        if (g.empty())
            out.push_back(Mat(val(w).rows(), val(w).cols()));
        else
            out.push_back(std::move(g));
    }
    return out;
}

// -- graph-building backward ------------------------------------------------------

std::vector<Var> Tape::backward_graph(Var root, const std::vector<Var>& wrt, const std::vector<Var>& stop) {
    check_on_tape(root, "backward_graph");
    if (!val(root).is_scalar())
        throw_shape("backward_graph: root must be scalar-shaped, got " + val(root).shape_str());
    for (Var w : wrt) check_on_tape(w, "backward_graph wrt");

    std::unordered_set<int32_t> stop_set;
    for (Var s : stop) stop_set.insert(s.id);

    // Only nodes that can reach a wrt target (without passing a stop node)
    // need adjoints; everything else would emit dead computation.
    std::vector<uint8_t> reach(static_cast<size_t>(root.id) + 1, 0);
    for (Var w : wrt)
        if (w.id <= root.id) reach[static_cast<size_t>(w.id)] = 1;
    for (int32_t id = 0; id <= root.id; ++id) {
        if (reach[static_cast<size_t>(id)] || stop_set.count(id)) continue;
        const Node& n = nodes_[static_cast<size_t>(id)];
        if ((n.a >= 0 && reach[static_cast<size_t>(n.a)]) || (n.b >= 0 && reach[static_cast<size_t>(n.b)]))
            reach[static_cast<size_t>(id)] = 1;
    }
    // stop nodes themselves may carry adjoints as operands of emitted nodes
    for (Var s : stop)
        if (s.id <= root.id) reach[static_cast<size_t>(s.id)] = 0;

    std::vector<Var> adj(static_cast<size_t>(root.id) + 1, Var{});
    adj[static_cast<size_t>(root.id)] = constant_scalar(1.0);

    auto want = [&](int32_t target) { return target >= 0 && reach[static_cast<size_t>(target)]; };
    auto accum = [&](int32_t target, Var contrib) {
        Var& slot = adj[static_cast<size_t>(target)];
        slot = slot.valid() ? add(slot, contrib) : contrib;
    };
    // Scalar-broadcast collapse: if the operand was 1x1 but the adjoint is bigger.
    auto accum_bc = [&](int32_t target, Var contrib) {
        if (nodes_[static_cast<size_t>(target)].val.is_scalar() && !val(contrib).is_scalar())
            contrib = sum(contrib);
        accum(target, contrib);
    };

    for (int32_t id = root.id; id >= 0; --id) {
        Var g = adj[static_cast<size_t>(id)];
        if (!g.valid()) continue;
        if (!reach[static_cast<size_t>(id)]) continue;
        // Copy the POD part; emitting nodes below may reallocate nodes_.
        const Op op = nodes_[static_cast<size_t>(id)].op;
        const int32_t na = nodes_[static_cast<size_t>(id)].a;
        const int32_t nb = nodes_[static_cast<size_t>(id)].b;
        const int ni0 = nodes_[static_cast<size_t>(id)].i0;
        const int ni1 = nodes_[static_cast<size_t>(id)].i1;
        const double nc = nodes_[static_cast<size_t>(id)].c;
        const Var va{na}, vb{nb}, self{id};

        const bool wa = want(na), wb = want(nb);
        switch (op) {
            case Op::Leaf:
            case Op::Const: break;
            case Op::Add:
                if (wa) accum_bc(na, g);
                if (wb) accum_bc(nb, g);
                break;
            case Op::Sub:
                if (wa) accum_bc(na, g);
                if (wb) accum_bc(nb, neg(g));
                break;
            case Op::Neg:
                if (wa) accum_bc(na, neg(g));
                break;
            case Op::Mul:
                if (wa) accum_bc(na, mul(g, vb));
                if (wb) accum_bc(nb, mul(g, va));
                break;
            case Op::SMul:
                if (wa) accum(na, smul(g, nc));
                break;
            case Op::MatMul:
                if (wa) accum(na, matmul(g, transpose(vb)));
                if (wb) accum(nb, matmul(transpose(va), g));
                break;
            case Op::Transpose:
                if (wa) accum(na, transpose(g));
                break;
            case Op::Dot:
                if (wa) accum(na, mul(g, vb));
                if (wb) accum(nb, mul(g, va));
                break;
            case Op::Sum: {
                if (!wa) break;
                const Mat& av = nodes_[static_cast<size_t>(na)].val;
                accum(na, mul(g, constant(Mat::full(av.rows(), av.cols(), 1.0))));
                break;
            }
            case Op::SumRows:
                if (wa) accum(na, repeat_rows(g, nodes_[static_cast<size_t>(na)].val.rows()));
                break;
            case Op::AddRow:
                if (wa) accum(na, g);
                if (wb) accum(nb, sum_rows(g));
                break;
            case Op::RepeatRows:
                if (wa) accum(na, sum_rows(g));
                break;
            case Op::Sin:
                if (wa) accum_bc(na, mul(g, cos(va)));
                break;
            case Op::Cos:
                if (wa) accum_bc(na, neg(mul(g, sin(va))));
                break;
            case Op::Exp:
                if (wa) accum_bc(na, mul(g, self));
                break;
            case Op::Log:
                if (wa) accum_bc(na, mul(g, pow(va, -1.0)));
                break;
            case Op::Tanh:
                if (wa) accum_bc(na, mul(g, sub(constant_scalar(1.0), square(self))));
                break;
            case Op::Softplus:
                if (wa) accum_bc(na, mul(g, sigmoid(va)));
                break;
            case Op::Sigmoid:
                if (wa) accum_bc(na, mul(g, mul(self, sub(constant_scalar(1.0), self))));
                break;
            case Op::Square:
                if (wa) accum_bc(na, smul(mul(g, va), 2.0));
                break;
            case Op::Pow:
                if (wa) accum_bc(na, smul(mul(g, pow(va, nc - 1.0)), nc));
                break;
            case Op::MaxE: {
                // Data-dependent masks enter as constants; exact a.e.
                const Mat& av = nodes_[static_cast<size_t>(na)].val;
                const Mat& bv = nodes_[static_cast<size_t>(nb)].val;
                const Mat& ov = nodes_[static_cast<size_t>(id)].val;
                Mat ma(ov.rows(), ov.cols()), mb(ov.rows(), ov.cols());
                for (size_t i = 0; i < ov.size(); ++i) {
                    const double ai = av.is_scalar() ? av[0] : av[i];
                    const double bi = bv.is_scalar() ? bv[0] : bv[i];
                    ma[i] = ai > bi ? 1.0 : 0.0;
                    mb[i] = 1.0 - ma[i];
                }
                if (wa) accum_bc(na, mul(g, constant(std::move(ma))));
                if (wb) accum_bc(nb, mul(g, constant(std::move(mb))));
                break;
            }
            case Op::MaxC: {
                if (!wa) break;
                const Mat& av = nodes_[static_cast<size_t>(na)].val;
                Mat m(av.rows(), av.cols());
                for (size_t i = 0; i < av.size(); ++i) m[i] = av[i] > nc ? 1.0 : 0.0;
                accum(na, mul(g, constant(std::move(m))));
                break;
            }
            case Op::MinC: {
                if (!wa) break;
                const Mat& av = nodes_[static_cast<size_t>(na)].val;
                Mat m(av.rows(), av.cols());
                for (size_t i = 0; i < av.size(); ++i) m[i] = av[i] <= nc ? 1.0 : 0.0;
                accum(na, mul(g, constant(std::move(m))));
                break;
            }
            case Op::Concat: {
                const int k1 = ni0;
                if (wa) accum(na, slice_cols(g, 0, k1));
                if (wb) accum(nb, slice_cols(g, k1, val(g).cols()));
                break;
            }
            case Op::SliceCols: {
                if (!wa) break;
                const Mat& av = nodes_[static_cast<size_t>(na)].val;
                Var padded = g;
                if (ni0 > 0) padded = concat(constant(Mat(av.rows(), ni0)), padded);
                if (ni1 < av.cols()) padded = concat(padded, constant(Mat(av.rows(), av.cols() - ni1)));
                accum(na, padded);
                break;
            }
            case Op::ConcatRows: {
                const int r1 = ni0;
                if (wa) accum(na, slice_rows(g, 0, r1));
                if (wb) accum(nb, slice_rows(g, r1, val(g).rows()));
                break;
            }
            case Op::SliceRows: {
                if (!wa) break;
                const Mat& av = nodes_[static_cast<size_t>(na)].val;
                Var padded = g;
                if (ni0 > 0) padded = concat_rows(constant(Mat(ni0, av.cols())), padded);
                if (ni1 < av.rows()) padded = concat_rows(padded, constant(Mat(av.rows() - ni1, av.cols())));
                accum(na, padded);
                break;
            }
            case Op::RowMatVec:
                if (wa) accum(na, row_outer(g, vb));
                if (wb) accum(nb, row_matvec_t(va, g));
                break;
            case Op::RowMatVecT:
                if (wa) accum(na, row_outer(vb, g));
                if (wb) accum(nb, row_matvec(va, g));
                break;
            case Op::RowOuter:
                if (wa) accum(na, row_matvec(g, vb));
                if (wb) accum(nb, row_matvec_t(g, va));
                break;
            case Op::RowTranspose:
                if (wa) accum(na, row_transpose(g, ni1));
                break;
        }
    }

    std::vector<Var> out;
    out.reserve(wrt.size());
    for (Var w : wrt) {
        Var g = w.id > root.id ? Var{} : adj[static_cast<size_t>(w.id)];
        if (!g.valid()) g = constant(Mat(val(w).rows(), val(w).cols()));
        out.push_back(g);
    }
    return out;
}

// -- compositions / helpers -------------------------------------------------------

Var rehu(Tape& t, Var x, double delta) {
    // square(clamp(x,0,delta))/(2 delta) + max(x-delta, 0)
    Var clamped = t.minc(t.maxc(x, 0.0), delta);
    Var quad = t.smul(t.square(clamped), 1.0 / (2.0 * delta));
    Var lin = t.maxc(t.add(x, t.constant_scalar(-delta)), 0.0);
    return t.add(quad, lin);
}

int ParamStore::add(std::string name, Mat init) {
    names_.push_back(std::move(name));
    values_.push_back(std::move(init));
    return static_cast<int>(values_.size() - 1);
}

int ParamStore::index_of(const std::string& name) const {
    for (size_t i = 0; i < names_.size(); ++i)
        if (names_[i] == name) return static_cast<int>(i);
    return -1;
}

size_t ParamStore::scalar_count() const {
    size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
}

std::vector<double> ParamStore::flatten() const {
    std::vector<double> out;
    out.reserve(scalar_count());
    for (const auto& v : values_)
        for (size_t i = 0; i < v.size(); ++i) out.push_back(v[i]);
    return out;
}

void ParamStore::unflatten(const std::vector<double>& flat) {
    size_t k = 0;
    for (auto& v : values_) {
        if (k + v.size() > flat.size()) throw_shape("ParamStore::unflatten: flat vector too short");
        for (size_t i = 0; i < v.size(); ++i) v[i] = flat[k++];
    }
    if (k != flat.size()) throw_shape("ParamStore::unflatten: flat vector too long");
}

Binding Binding::bind(Tape& t, const ParamStore& ps) {
    Binding b;
    b.vars.reserve(ps.count());
    for (size_t i = 0; i < ps.count(); ++i) b.vars.push_back(t.leaf(ps.value(static_cast<int>(i))));
    return b;
}

double ScalarField::value(const ParamStore& ps, const Mat& x_row) const {
    Tape t;
    Binding b = Binding::bind(t, ps);
    Var y = apply(t, b, t.constant(x_row));
    return t.val(y)[0];
}

Mat ScalarField::grad(const ParamStore& ps, const Mat& x_row) const {
    Tape t;
    Binding b = Binding::bind(t, ps);
    Var X = t.leaf(x_row);
    Var y = apply(t, b, X);
    auto g = t.backward(t.sum(y), {X});
    return g[0];
}

Mat field_hvp(const ScalarField& f, const ParamStore& ps, const Mat& x_row, const Mat& v_row) {
    if (!x_row.same_shape(v_row))
        throw_shape("hvp: x and v dimensions differ (" + x_row.shape_str() + " vs " + v_row.shape_str() + ")");
    if (x_row.cols() != f.dim())
        throw_shape("hvp: point has dimension " + std::to_string(x_row.cols()) + ", field expects " +
                    std::to_string(f.dim()));
    Tape t;
    Binding b = Binding::bind(t, ps);
    Var X = t.leaf(x_row);
    Var y = f.apply(t, b, X);
    auto g = t.backward_graph(t.sum(y), {X});
    Var s = t.dot(g[0], t.constant(v_row));
    auto h = t.backward(s, {X});
    return h[0];
}

}  // namespace ghnn
