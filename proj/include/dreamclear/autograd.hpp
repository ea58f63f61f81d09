#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every value in the model is a 2-D matrix: token grids are N x C,
// images are (H*W) x channels, scalars are 1 x 1.
//
// Graph edges are only recorded when at least one input requires a gradient,
// so pure inference runs without retaining intermediate nodes.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

namespace dreamclear {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Matf = Mat<float>;
using Matd = Mat<double>;

namespace ag {

template <typename T>
struct Node {
    Mat<T> value;
    Mat<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Mat<T>& grad_ref() {
        if (grad.size() == 0) grad = Mat<T>::Zero(value.rows(), value.cols());
        return grad;
    }
    Eigen::Index rows() const { return value.rows(); }
    Eigen::Index cols() const { return value.cols(); }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

/// While alive, new nodes record no graph even if inputs require gradients.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

template <typename T>
Var<T> constant(Mat<T> value);

/// Leaf node whose gradient accumulates across backward passes until cleared.
template <typename T>
Var<T> leaf(Mat<T> value, bool requires_grad);

/// Seeds d(root)/d(root) = 1 (root must be 1 x 1) and propagates to every
/// reachable node that requires a gradient.
template <typename T>
void backward(const Var<T>& root);

// Elementwise binary ops accept b with the same shape as a, or broadcastable
// as a row (1 x C), a column (N x 1) or a scalar (1 x 1).
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);

template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// x * w + b with b a 1 x out row.
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);

/// (1 + gamma) * x + beta with gamma/beta shaped like x or as a 1 x C row.
template <typename T> Var<T> modulate(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta);

template <typename T> Var<T> layer_norm(const Var<T>& x, T eps = T(1e-6));
template <typename T> Var<T> gelu(const Var<T>& x);
template <typename T> Var<T> silu(const Var<T>& x);
template <typename T> Var<T> relu(const Var<T>& x);
template <typename T> Var<T> softmax_rows(const Var<T>& x);
template <typename T> Var<T> clamp(const Var<T>& x, T lo, T hi);

/// Multi-head scaled dot-product attention. q is Nq x C, k and v are Nk x C.
/// Keys with key_mask[j] == 0 receive zero weight; a query whose keys are all
/// masked produces a zero output row.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads,
                 std::span<const std::uint8_t> key_mask = {});

template <typename T> Var<T> slice_cols(const Var<T>& a, Eigen::Index start, Eigen::Index len);
template <typename T> Var<T> concat_rows(const std::vector<Var<T>>& parts);
template <typename T> Var<T> concat_cols(const std::vector<Var<T>>& parts);

/// out.flat[i] = index[i] >= 0 ? a.flat[index[i]] : 0. Covers patch
/// rearrangement, im2col and embedding lookups.
template <typename T>
Var<T> gather(const Var<T>& a, Eigen::Index rows, Eigen::Index cols,
              std::shared_ptr<const std::vector<std::int64_t>> index);

template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
/// mean((a - target)^2) over all elements.
template <typename T> Var<T> mse(const Var<T>& a, const Mat<T>& target);

}  // namespace ag
}  // namespace dreamclear
