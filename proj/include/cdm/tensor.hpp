#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "cdm/common.hpp"
#include "cdm/sparse.hpp"

namespace cdm::ad {

// Reverse-mode engine. Every op builds a Node holding the forward value and
// a closure that scatters the node's gradient into its parents. backward()
// runs the closures in reverse topological order; all reductions are
// sequential, so a fixed seed gives a bit-identical trajectory.

struct Node {
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated during backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    size_t size() const { return value.size(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static Tensor zeros(const std::vector<int>& shape, bool requires_grad = false);
    static Tensor from_data(const std::vector<int>& shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double v);
    static Tensor from_matrix(const Matrix& m, bool requires_grad = false);

    bool valid() const { return n_ != nullptr; }
    const std::vector<int>& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    size_t size() const { return n_->value.size(); }
    const std::vector<double>& value() const { return n_->value; }
    std::vector<double>& mutable_value() { return n_->value; }
    bool requires_grad() const { return n_->requires_grad; }
    bool has_grad() const { return n_->grad.size() == n_->value.size(); }
    /// Gradient buffer; StateError until backward() has reached this node.
    const std::vector<double>& grad() const;
    double scalar_value() const;
    Matrix to_matrix() const;
    std::shared_ptr<Node> node() const { return n_; }

  private:
    std::shared_ptr<Node> n_;
};

/// Factory for ops defined outside this header (losses). parents' grads are
/// accumulated by `backprop(self)` using self.grad.
Tensor custom_op(std::vector<int> shape, std::vector<double> value, std::vector<Tensor> parents,
                 std::function<void(Node&)> backprop);

// Elementwise / linear algebra.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double c);
Tensor add_row_bias(const Tensor& a, const Tensor& bias);  // (n,k) + (k)
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a @ b^T
Tensor relu(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& a, double eps = 1e-5);  // normalizes each item over trailing dims
Tensor l2_normalize_rows(const Tensor& a);
Tensor reduce_sum(const Tensor& a);
Tensor col_sums(const Tensor& a);        // (n,k) -> (k)
Tensor frobenius_norm(const Tensor& a);  // sqrt of sum of squares
Tensor reshape(const Tensor& a, const std::vector<int>& shape);

/// x: (batch, in_ch, len), w: (out_ch, in_ch, kernel), b: (out_ch).
/// Zero padding; out_len = (len + 2*pad - kernel) / stride + 1.
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);

/// x: (batch, ch, len); ties take the lowest index in the window.
Tensor maxpool1d(const Tensor& x, int size, int stride);

/// Sparse times dense: a (n x n) @ x (n, d).
Tensor spmm(const CsrMatrix& a, const Tensor& x);

/// Tr(S^T A S) - (1/2m) * ||d^T S||^2, the modularity quadratic form with
/// the rank-one degree term kept separate so the dense n x n matrix is
/// never materialized. S: (n, k); adj: 0/1 CSR; degrees: length n.
Tensor trace_quadform(const Tensor& s, const CsrMatrix& adj, std::span<const double> degrees,
                      double m);

/// Runs reverse-mode accumulation from a scalar root.
void backward(const Tensor& root);

struct GradCheckReport {
    std::vector<double> max_rel_err_per_input;
    double max_rel_err = 0.0;
    bool within(double tol) const { return max_rel_err <= tol; }
};

/// Central finite differences against the analytic gradient. The op output
/// is contracted with fixed pseudo-random weights so tensor-valued ops
/// reduce to a scalar. Relative error is |a - n| / max(1, |a|, |n|).
GradCheckReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& op,
                           std::vector<Tensor> inputs, double h, uint64_t weight_seed = 7);

}  // namespace cdm::ad
