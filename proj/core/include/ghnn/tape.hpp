#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ghnn/errors.hpp"
#include "ghnn/mat.hpp"

namespace ghnn {

enum class Op : uint8_t {
    Leaf, Const,
    Add, Sub, Neg, Mul, SMul,
    MatMul, Transpose, Dot, Sum, SumRows, AddRow, RepeatRows,
    Sin, Cos, Exp, Log, Tanh, Softplus, Sigmoid, Square, Pow,
    MaxE, MaxC, MinC,
    Concat, SliceCols, ConcatRows, SliceRows,
    RowMatVec, RowMatVecT, RowOuter, RowTranspose,
};

const char* op_name(Op op);

/// Handle to a node on a Tape.
struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

/// Append-only reverse-mode differentiation tape. Nodes are recorded in
/// topological order (operands always precede consumers) and primal values are
/// computed eagerly. backward() produces numeric gradients; backward_graph()
/// records the gradient computation as new nodes on the same tape, so those
/// gradients can be differentiated again (nested differentiation).
///
/// A Tape is single-threaded; independent tapes may run on independent threads.
class Tape {
public:
    struct Node {
        Op op;
        int32_t a = -1, b = -1;
        int32_t i0 = 0, i1 = 0;  // aux ints: slice range / row-op dimension
        double c = 0.0;          // scalar payload: smul factor, pow exponent, max/min bound
        Mat val;
    };

    Tape() { nodes_.reserve(256); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    const Mat& val(Var v) const { return node(v).val; }
    int rows(Var v) const { return node(v).val.rows(); }
    int cols(Var v) const { return node(v).val.cols(); }

    // -- recording ------------------------------------------------------------
    Var leaf(Mat v);
    Var constant(Mat v);
    Var constant_scalar(double v) { return constant(Mat::scalar(v)); }

    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var neg(Var a);
    Var mul(Var a, Var b);           // elementwise; either side may be 1x1 (broadcast)
    Var smul(Var a, double c);
    Var matmul(Var a, Var b);
    Var matvec(Var a, Var b);        // matmul with an n x 1 right operand
    Var transpose(Var a);
    Var dot(Var a, Var b);           // sum of elementwise product -> 1x1
    Var sum(Var a);                  // all elements -> 1x1
    Var sum_rows(Var a);             // m x n -> 1 x n
    Var add_row(Var X, Var r);       // m x n + 1 x n broadcast over rows
    Var repeat_rows(Var r, int m);   // 1 x n -> m x n
    Var sin(Var a);
    Var cos(Var a);
    Var exp(Var a);
    Var log(Var a);
    Var tanh(Var a);
    Var softplus(Var a);
    Var sigmoid(Var a);
    Var square(Var a);
    Var pow(Var a, double p);
    Var maxe(Var a, Var b);          // elementwise max; gradient to a where a > b
    Var maxc(Var a, double c);       // max(a, c); gradient where a > c
    Var minc(Var a, double c);       // min(a, c); gradient where a <= c
    Var concat(Var a, Var b);        // columns
    Var slice_cols(Var a, int c0, int c1);
    Var concat_rows(Var a, Var b);   // stack vertically
    Var slice_rows(Var a, int r0, int r1);
    Var row_matvec(Var Wflat, Var v);    // out[r,i] = sum_j W[r,i*n+j] v[r,j]
    Var row_matvec_t(Var Wflat, Var v);  // out[r,i] = sum_j W[r,j*n+i] v[r,j]
    Var row_outer(Var a, Var b);         // out[r,i*n+j] = a[r,i] b[r,j]
    Var row_transpose(Var Wflat, int n);

    // -- differentiation ------------------------------------------------------

    /// Numeric gradients of a scalar root with respect to wrt nodes.
    std::vector<Mat> backward(Var root, const std::vector<Var>& wrt);

    /// Graph-building backward: gradients are returned as nodes on this tape
    /// and may be differentiated again. Adjoints are not propagated through
    /// nodes in `stop` (they stay operands of the emitted nodes, so an outer
    /// backward still reaches them).
    std::vector<Var> backward_graph(Var root, const std::vector<Var>& wrt,
                                    const std::vector<Var>& stop = {});

private:
    Var push(Node n);
    const Node& node(Var v) const;
    void check_on_tape(Var v, const char* what) const;

    std::vector<Node> nodes_;
};

// -- convenience compositions --------------------------------------------------

/// Rectified Huber unit: 0 for x<=0, x^2/(2*delta) on (0,delta), x-delta/2 beyond.
/// C1 everywhere; built from clamp/max so nested differentiation works unchanged.
Var rehu(Tape& t, Var x, double delta);

/// Parameters referenced by fields/models. Values live here between tapes;
/// bind() turns them into leaf nodes for one evaluation.
class ParamStore {
public:
    int add(std::string name, Mat init);
    int index_of(const std::string& name) const;  // -1 if absent
    size_t count() const { return values_.size(); }
    const std::string& name(int i) const { return names_[i]; }
    Mat& value(int i) { return values_[i]; }
    const Mat& value(int i) const { return values_[i]; }

    size_t scalar_count() const;
    std::vector<double> flatten() const;
    void unflatten(const std::vector<double>& flat);

private:
    std::vector<std::string> names_;
    std::vector<Mat> values_;
};

/// Leaf vars for every parameter of a store, valid for one tape.
struct Binding {
    std::vector<Var> vars;
    static Binding bind(Tape& t, const ParamStore& ps);
    Var operator[](int i) const { return vars[static_cast<size_t>(i)]; }
};

/// A parameterized differentiable map R^n -> R evaluated batched:
/// X is m x n (rows are points), result is m x 1.
struct ScalarField {
    virtual ~ScalarField() = default;
    virtual int dim() const = 0;
    virtual Var apply(Tape& t, const Binding& bind, Var X) const = 0;

    double value(const ParamStore& ps, const Mat& x_row) const;
    Mat grad(const ParamStore& ps, const Mat& x_row) const;  // 1 x n
};

/// Hessian-vector product d^2 f(x) v computed as the x-gradient of
/// <grad f(x), v> with v held constant; the Hessian is never materialized.
Mat field_hvp(const ScalarField& f, const ParamStore& ps, const Mat& x_row, const Mat& v_row);

}  // namespace ghnn
