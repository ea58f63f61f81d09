#include "dreamclear/autograd.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace dreamclear::ag {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
Var<T> make_node(Mat<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> fn) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    for (const auto& p : parents) {
        if (g_grad_enabled && p->requires_grad) {
            node->requires_grad = true;
            break;
        }
    }
    if (node->requires_grad) {
        node->parents = std::move(parents);
        node->backward_fn = std::move(fn);
    }
    return node;
}

enum class Bcast { same, row, col, scalar };

template <typename T>
Bcast broadcast_kind(const Mat<T>& a, const Mat<T>& b, const char* op) {
    if (b.rows() == a.rows() && b.cols() == a.cols()) return Bcast::same;
    if (b.rows() == 1 && b.cols() == 1) return Bcast::scalar;
    if (b.rows() == 1 && b.cols() == a.cols()) return Bcast::row;
    if (b.cols() == 1 && b.rows() == a.rows()) return Bcast::col;
    throw std::invalid_argument(std::string(op) + ": incompatible shapes " + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " and " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
}

template <typename T>
Mat<T> expand(const Mat<T>& b, Bcast kind, Eigen::Index rows, Eigen::Index cols) {
    switch (kind) {
        case Bcast::same: return b;
        case Bcast::row: return b.replicate(rows, 1);
        case Bcast::col: return b.replicate(1, cols);
        case Bcast::scalar: return Mat<T>::Constant(rows, cols, b(0, 0));
    }
    return b;
}

template <typename T>
void reduce_into(Mat<T>& target, const Mat<T>& g, Bcast kind) {
    switch (kind) {
        case Bcast::same: target += g; break;
        case Bcast::row: target += g.colwise().sum(); break;
        case Bcast::col: target += g.rowwise().sum(); break;
        case Bcast::scalar: target(0, 0) += g.sum(); break;
    }
}

void check_same(Eigen::Index ar, Eigen::Index ac, Eigen::Index br, Eigen::Index bc, const char* op) {
    if (ar != br || ac != bc) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + std::to_string(ar) + "x" +
                                    std::to_string(ac) + " vs " + std::to_string(br) + "x" + std::to_string(bc));
    }
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename T>
Var<T> constant(Mat<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    return node;
}

template <typename T>
Var<T> leaf(Mat<T> value, bool requires_grad) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return node;
}

template <typename T>
void backward(const Var<T>& root) {
    if (root->value.size() != 1) throw std::invalid_argument("backward: root must be a scalar");
    if (!root->requires_grad) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->grad_ref()(0, 0) += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->backward_fn && node->grad.size() != 0) node->backward_fn(*node);
    }
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    const Bcast kind = broadcast_kind(a->value, b->value, "add");
    Mat<T> out = a->value + expand(b->value, kind, a->rows(), a->cols());
    return make_node<T>(std::move(out), {a, b}, [a, b, kind](Node<T>& self) {
        if (a->requires_grad) a->grad_ref() += self.grad;
        if (b->requires_grad) reduce_into(b->grad_ref(), self.grad, kind);
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    const Bcast kind = broadcast_kind(a->value, b->value, "sub");
    Mat<T> out = a->value - expand(b->value, kind, a->rows(), a->cols());
    return make_node<T>(std::move(out), {a, b}, [a, b, kind](Node<T>& self) {
        if (a->requires_grad) a->grad_ref() += self.grad;
        if (b->requires_grad) reduce_into(b->grad_ref(), Mat<T>(-self.grad), kind);
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    const Bcast kind = broadcast_kind(a->value, b->value, "mul");
    Mat<T> bx = expand(b->value, kind, a->rows(), a->cols());
    Mat<T> out = a->value.cwiseProduct(bx);
    return make_node<T>(std::move(out), {a, b}, [a, b, kind, bx = std::move(bx)](Node<T>& self) {
        if (a->requires_grad) a->grad_ref() += self.grad.cwiseProduct(bx);
        if (b->requires_grad) reduce_into(b->grad_ref(), Mat<T>(self.grad.cwiseProduct(a->value)), kind);
    });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    if (a->cols() != b->rows()) {
        throw std::invalid_argument("matmul: inner dimensions differ (" + std::to_string(a->cols()) + " vs " +
                                    std::to_string(b->rows()) + ")");
    }
    Mat<T> out = a->value * b->value;
    return make_node<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
        if (a->requires_grad) a->grad_ref().noalias() += self.grad * b->value.transpose();
        if (b->requires_grad) b->grad_ref().noalias() += a->value.transpose() * self.grad;
    });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    if (x->cols() != w->rows() || b->rows() != 1 || b->cols() != w->cols()) {
        throw std::invalid_argument("linear: shape mismatch (" + std::to_string(x->cols()) + " inputs, weight " +
                                    std::to_string(w->rows()) + "x" + std::to_string(w->cols()) + ")");
    }
    Mat<T> out(x->rows(), w->cols());
    out.noalias() = x->value * w->value;
    out.rowwise() += b->value.row(0);
    return make_node<T>(std::move(out), {x, w, b}, [x, w, b](Node<T>& self) {
        if (x->requires_grad) x->grad_ref().noalias() += self.grad * w->value.transpose();
        if (w->requires_grad) w->grad_ref().noalias() += x->value.transpose() * self.grad;
        if (b->requires_grad) b->grad_ref() += self.grad.colwise().sum();
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    return make_node<T>(a->value * s, {a}, [a, s](Node<T>& self) { a->grad_ref() += self.grad * s; });
}

template <typename T>
Var<T> modulate(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
    const Bcast gk = broadcast_kind(x->value, gamma->value, "modulate");
    const Bcast bk = broadcast_kind(x->value, beta->value, "modulate");
    Mat<T> g = expand(gamma->value, gk, x->rows(), x->cols());
    Mat<T> out = x->value + x->value.cwiseProduct(g) + expand(beta->value, bk, x->rows(), x->cols());
    return make_node<T>(std::move(out), {x, gamma, beta}, [x, gamma, beta, gk, bk, g = std::move(g)](Node<T>& self) {
        if (x->requires_grad) x->grad_ref() += self.grad + self.grad.cwiseProduct(g);
        if (gamma->requires_grad) reduce_into(gamma->grad_ref(), Mat<T>(self.grad.cwiseProduct(x->value)), gk);
        if (beta->requires_grad) reduce_into(beta->grad_ref(), self.grad, bk);
    });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, T eps) {
    const Eigen::Index n = x->rows();
    const Eigen::Index c = x->cols();
    Mat<T> xhat(n, c);
    Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const T mu = x->value.row(i).mean();
        const T var = (x->value.row(i).array() - mu).square().mean();
        inv_std(i) = T(1) / std::sqrt(var + eps);
        xhat.row(i) = (x->value.row(i).array() - mu) * inv_std(i);
    }
    Mat<T> out = xhat;
    return make_node<T>(std::move(out), {x}, [x, xhat = std::move(xhat), inv_std](Node<T>& self) {
        auto& gx = x->grad_ref();
        for (Eigen::Index i = 0; i < self.grad.rows(); ++i) {
            const auto g = self.grad.row(i).array();
            const auto h = xhat.row(i).array();
            const T mg = g.mean();
            const T mgh = (g * h).mean();
            gx.row(i).array() += inv_std(i) * (g - mg - h * mgh);
        }
    });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
    const T k0 = T(0.7978845608028654);  // sqrt(2/pi)
    const T k1 = T(0.044715);
    Mat<T> th = (k0 * (x->value.array() + k1 * x->value.array().cube())).tanh().matrix();
    Mat<T> out = (T(0.5) * x->value.array() * (T(1) + th.array())).matrix();
    return make_node<T>(std::move(out), {x}, [x, th = std::move(th), k0, k1](Node<T>& self) {
        const auto xv = x->value.array();
        const auto t = th.array();
        auto d = T(0.5) * (T(1) + t) + T(0.5) * xv * (T(1) - t * t) * k0 * (T(1) + T(3) * k1 * xv * xv);
        x->grad_ref().array() += self.grad.array() * d;
    });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
    Mat<T> sig = (T(1) / (T(1) + (-x->value.array()).exp())).matrix();
    Mat<T> out = x->value.cwiseProduct(sig);
    return make_node<T>(std::move(out), {x}, [x, sig = std::move(sig)](Node<T>& self) {
        const auto s = sig.array();
        x->grad_ref().array() += self.grad.array() * (s * (T(1) + x->value.array() * (T(1) - s)));
    });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    Mat<T> out = x->value.cwiseMax(T(0));
    return make_node<T>(std::move(out), {x}, [x](Node<T>& self) {
        x->grad_ref().array() += (x->value.array() > T(0)).select(self.grad.array(), T(0));
    });
}

template <typename T>
Var<T> softmax_rows(const Var<T>& x) {
    Mat<T> out(x->rows(), x->cols());
    for (Eigen::Index i = 0; i < x->rows(); ++i) {
        const T m = x->value.row(i).maxCoeff();
        auto e = (x->value.row(i).array() - m).exp();
        out.row(i) = e / e.sum();
    }
    Mat<T> keep = out;
    return make_node<T>(std::move(out), {x}, [x, p = std::move(keep)](Node<T>& self) {
        auto& gx = x->grad_ref();
        for (Eigen::Index i = 0; i < p.rows(); ++i) {
            const T dot = self.grad.row(i).dot(p.row(i));
            gx.row(i).array() += p.row(i).array() * (self.grad.row(i).array() - dot);
        }
    });
}

template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
    Mat<T> out = x->value.cwiseMax(lo).cwiseMin(hi);
    return make_node<T>(std::move(out), {x}, [x, lo, hi](Node<T>& self) {
        const auto v = x->value.array();
        x->grad_ref().array() += (v >= lo && v <= hi).select(self.grad.array(), T(0));
    });
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, std::span<const std::uint8_t> key_mask) {
    const Eigen::Index nq = q->rows();
    const Eigen::Index nk = k->rows();
    const Eigen::Index c = q->cols();
    if (k->cols() != c || v->cols() != c || v->rows() != nk) throw std::invalid_argument("attention: shape mismatch");
    if (heads <= 0 || c % heads != 0) throw std::invalid_argument("attention: width not divisible by head count");
    if (!key_mask.empty() && static_cast<Eigen::Index>(key_mask.size()) != nk) {
        throw std::invalid_argument("attention: key mask length differs from key count");
    }
    const Eigen::Index d = c / heads;
    const T inv_sqrt_d = T(1) / std::sqrt(T(d));
    std::vector<std::uint8_t> mask(key_mask.begin(), key_mask.end());

    Mat<T> out = Mat<T>::Zero(nq, c);
    std::vector<Mat<T>> probs(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        const auto qh = q->value.middleCols(h * d, d);
        const auto kh = k->value.middleCols(h * d, d);
        const auto vh = v->value.middleCols(h * d, d);
        Mat<T> s = (qh * kh.transpose()) * inv_sqrt_d;
        Mat<T>& p = probs[static_cast<std::size_t>(h)];
        if (!mask.empty()) {
            for (Eigen::Index j = 0; j < nk; ++j) {
                if (!mask[static_cast<std::size_t>(j)]) s.col(j).setConstant(-std::numeric_limits<T>::infinity());
            }
        }
        p.resize(nq, nk);
        for (Eigen::Index i = 0; i < nq; ++i) {
            const T m = nk > 0 ? s.row(i).maxCoeff() : -std::numeric_limits<T>::infinity();
            if (m == -std::numeric_limits<T>::infinity()) {
                p.row(i).setZero();  // every key masked
                continue;
            }
            p.row(i) = (s.row(i).array() - m).exp();
            p.row(i) /= p.row(i).sum();
        }
        out.middleCols(h * d, d).noalias() = p * vh;
    }

    return make_node<T>(std::move(out), {q, k, v},
                        [q, k, v, heads, d, inv_sqrt_d, probs = std::move(probs)](Node<T>& self) {
                            for (int h = 0; h < heads; ++h) {
                                const Mat<T>& p = probs[static_cast<std::size_t>(h)];
                                const auto go = self.grad.middleCols(h * d, d);
                                if (v->requires_grad) v->grad_ref().middleCols(h * d, d).noalias() += p.transpose() * go;
                                if (!q->requires_grad && !k->requires_grad) continue;
                                Mat<T> dp = go * v->value.middleCols(h * d, d).transpose();
                                Mat<T> ds(p.rows(), p.cols());
                                for (Eigen::Index i = 0; i < p.rows(); ++i) {
                                    const T dot = dp.row(i).dot(p.row(i));
                                    ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
                                }
                                ds *= inv_sqrt_d;
                                if (q->requires_grad) {
                                    q->grad_ref().middleCols(h * d, d).noalias() += ds * k->value.middleCols(h * d, d);
                                }
                                if (k->requires_grad) {
                                    k->grad_ref().middleCols(h * d, d).noalias() +=
                                        ds.transpose() * q->value.middleCols(h * d, d);
                                }
                            }
                        });
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, Eigen::Index start, Eigen::Index len) {
    if (start < 0 || len < 0 || start + len > a->cols()) throw std::invalid_argument("slice_cols: out of range");
    Mat<T> out = a->value.middleCols(start, len);
    return make_node<T>(std::move(out), {a}, [a, start, len](Node<T>& self) {
        a->grad_ref().middleCols(start, len) += self.grad;
    });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts.front()->cols();
    for (const auto& p : parts) {
        if (p->cols() != cols) throw std::invalid_argument("concat_rows: column counts differ");
        rows += p->rows();
    }
    Mat<T> out(rows, cols);
    Eigen::Index r = 0;
    for (const auto& p : parts) {
        out.middleRows(r, p->rows()) = p->value;
        r += p->rows();
    }
    return make_node<T>(std::move(out), parts, [parts](Node<T>& self) {
        Eigen::Index r = 0;
        for (const auto& p : parts) {
            if (p->requires_grad) p->grad_ref() += self.grad.middleRows(r, p->rows());
            r += p->rows();
        }
    });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    Eigen::Index cols = 0;
    const Eigen::Index rows = parts.front()->rows();
    for (const auto& p : parts) {
        if (p->rows() != rows) throw std::invalid_argument("concat_cols: row counts differ");
        cols += p->cols();
    }
    Mat<T> out(rows, cols);
    Eigen::Index c = 0;
    for (const auto& p : parts) {
        out.middleCols(c, p->cols()) = p->value;
        c += p->cols();
    }
    return make_node<T>(std::move(out), parts, [parts](Node<T>& self) {
        Eigen::Index c = 0;
        for (const auto& p : parts) {
            if (p->requires_grad) p->grad_ref() += self.grad.middleCols(c, p->cols());
            c += p->cols();
        }
    });
}

template <typename T>
Var<T> gather(const Var<T>& a, Eigen::Index rows, Eigen::Index cols,
              std::shared_ptr<const std::vector<std::int64_t>> index) {
    if (static_cast<Eigen::Index>(index->size()) != rows * cols) throw std::invalid_argument("gather: index size");
    Mat<T> out(rows, cols);
    const T* src = a->value.data();
    T* dst = out.data();
    const auto n = static_cast<std::int64_t>(a->value.size());
    for (std::size_t i = 0; i < index->size(); ++i) {
        const std::int64_t j = (*index)[i];
        if (j >= n) throw std::invalid_argument("gather: index out of range");
        dst[i] = j >= 0 ? src[j] : T(0);
    }
    return make_node<T>(std::move(out), {a}, [a, index](Node<T>& self) {
        T* g = a->grad_ref().data();
        const T* up = self.grad.data();
        for (std::size_t i = 0; i < index->size(); ++i) {
            const std::int64_t j = (*index)[i];
            if (j >= 0) g[j] += up[i];
        }
    });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
    Mat<T> out(1, 1);
    out(0, 0) = a->value.sum();
    return make_node<T>(std::move(out), {a}, [a](Node<T>& self) { a->grad_ref().array() += self.grad(0, 0); });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
    Mat<T> out(1, 1);
    const T n = T(a->value.size());
    out(0, 0) = a->value.sum() / n;
    return make_node<T>(std::move(out), {a}, [a, n](Node<T>& self) { a->grad_ref().array() += self.grad(0, 0) / n; });
}

template <typename T>
Var<T> mse(const Var<T>& a, const Mat<T>& target) {
    check_same(a->rows(), a->cols(), target.rows(), target.cols(), "mse");
    Mat<T> diff = a->value - target;
    const T n = T(diff.size());
    Mat<T> out(1, 1);
    out(0, 0) = diff.squaredNorm() / n;
    return make_node<T>(std::move(out), {a}, [a, diff = std::move(diff), n](Node<T>& self) {
        a->grad_ref() += diff * (T(2) * self.grad(0, 0) / n);
    });
}

#define DREAMCLEAR_AG_INSTANTIATE(T)                                                                   \
    template Var<T> constant<T>(Mat<T>);                                                               \
    template Var<T> leaf<T>(Mat<T>, bool);                                                             \
    template void backward<T>(const Var<T>&);                                                          \
    template Var<T> add<T>(const Var<T>&, const Var<T>&);                                              \
    template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                              \
    template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                              \
    template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                           \
    template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                            \
    template Var<T> scale<T>(const Var<T>&, T);                                                        \
    template Var<T> modulate<T>(const Var<T>&, const Var<T>&, const Var<T>&);                          \
    template Var<T> layer_norm<T>(const Var<T>&, T);                                                   \
    template Var<T> gelu<T>(const Var<T>&);                                                            \
    template Var<T> silu<T>(const Var<T>&);                                                            \
    template Var<T> relu<T>(const Var<T>&);                                                            \
    template Var<T> softmax_rows<T>(const Var<T>&);                                                    \
    template Var<T> clamp<T>(const Var<T>&, T, T);                                                     \
    template Var<T> attention<T>(const Var<T>&, const Var<T>&, const Var<T>&, int,                     \
                                 std::span<const std::uint8_t>);                                       \
    template Var<T> slice_cols<T>(const Var<T>&, Eigen::Index, Eigen::Index);                          \
    template Var<T> concat_rows<T>(const std::vector<Var<T>>&);                                        \
    template Var<T> concat_cols<T>(const std::vector<Var<T>>&);                                        \
    template Var<T> gather<T>(const Var<T>&, Eigen::Index, Eigen::Index,                               \
                              std::shared_ptr<const std::vector<std::int64_t>>);                       \
    template Var<T> sum<T>(const Var<T>&);                                                             \
    template Var<T> mean<T>(const Var<T>&);                                                            \
    template Var<T> mse<T>(const Var<T>&, const Mat<T>&);

DREAMCLEAR_AG_INSTANTIATE(float)
DREAMCLEAR_AG_INSTANTIATE(double)

}  // namespace dreamclear::ag
