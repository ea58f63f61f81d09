#include "dreamclear/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace dreamclear {

template <typename T>
ag::Var<T> ParamStore<T>::add(const std::string& name, Mat<T> init) {
    if (contains(name)) throw std::invalid_argument("duplicate parameter: " + name);
    auto var = ag::leaf<T>(std::move(init), true);
    index_[name] = entries_.size();
    entries_.emplace_back(name, var);
    return var;
}

template <typename T>
ag::Var<T> ParamStore<T>::get(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return entries_[it->second].second;
}

template <typename T>
std::size_t ParamStore<T>::num_scalars() const {
    std::size_t n = 0;
    for (const auto& [_, v] : entries_) n += static_cast<std::size_t>(v->value.size());
    return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
    for (auto& [_, v] : entries_) v->grad.resize(0, 0);
}

template <typename T>
void ParamStore<T>::set_trainable(const std::vector<std::string>& prefixes) {
    for (auto& [name, v] : entries_) {
        bool match = false;
        for (const auto& p : prefixes) {
            if (name.compare(0, p.size(), p) == 0) {
                match = true;
                break;
            }
        }
        v->requires_grad = match;
    }
}

template <typename T>
void ParamStore<T>::set_all_trainable(bool trainable) {
    for (auto& [_, v] : entries_) v->requires_grad = trainable;
}

template <typename T>
template <typename U>
void ParamStore<T>::copy_values_from(const ParamStore<U>& other, const std::string& src_prefix,
                                     const std::string& dst_prefix) {
    for (auto& [name, v] : entries_) {
        if (name.compare(0, dst_prefix.size(), dst_prefix) != 0) continue;
        const std::string src = src_prefix + name.substr(dst_prefix.size());
        const auto& s = other.get(src)->value;
        if (s.rows() != v->value.rows() || s.cols() != v->value.cols()) {
            throw std::invalid_argument("parameter shape mismatch while copying " + src);
        }
        v->value = s.template cast<T>();
    }
}

template <typename T>
Mat<T> init_matrix(Eigen::Index rows, Eigen::Index cols, Init init, Rng& rng, double stddev) {
    switch (init) {
        case Init::zero: return Mat<T>::Zero(rows, cols);
        case Init::normal: return (rng.normal_matrix<double>(rows, cols) * stddev).template cast<T>();
        case Init::xavier: {
            const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
            Mat<T> m(rows, cols);
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
            return m;
        }
    }
    return Mat<T>::Zero(rows, cols);
}

template <typename T>
Linear<T>::Linear(ParamStore<T>& store, const std::string& name, int in, int out, Init init, Rng& rng)
    : weight(store.add(name + ".weight", init_matrix<T>(in, out, init, rng))),
      bias(store.add(name + ".bias", Mat<T>::Zero(1, out))) {}

template <typename T>
Linear<T> Linear<T>::bind(const ParamStore<T>& store, const std::string& name) {
    Linear l;
    l.weight = store.get(name + ".weight");
    l.bias = store.get(name + ".bias");
    return l;
}

template <typename T>
void AdamW<T>::step(ParamStore<T>& store) {
    ++step_;
    T clip = T(1);
    if (config_.max_grad_norm > 0.0) {
        double sq = 0.0;
        for (const auto& [_, p] : store.entries()) {
            if (p->requires_grad && p->grad.size() != 0) sq += static_cast<double>(p->grad.squaredNorm());
        }
        const double norm = std::sqrt(sq);
        if (norm > config_.max_grad_norm) clip = static_cast<T>(config_.max_grad_norm / (norm + 1e-12));
    }
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    const T lr = static_cast<T>(config_.lr);
    const T b1 = static_cast<T>(config_.beta1);
    const T b2 = static_cast<T>(config_.beta2);
    const T eps = static_cast<T>(config_.eps);
    const T wd = static_cast<T>(config_.weight_decay);
    const T step_size = static_cast<T>(config_.lr / bc1);
    const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));

    for (auto& [name, p] : store.entries()) {
        if (!p->requires_grad) continue;
        auto& mom = moments_[name];
        if (mom.m.size() == 0) {
            mom.m = Mat<T>::Zero(p->value.rows(), p->value.cols());
            mom.v = Mat<T>::Zero(p->value.rows(), p->value.cols());
        }
        Mat<T> g = p->grad.size() != 0 ? Mat<T>(p->grad * clip) : Mat<T>::Zero(p->value.rows(), p->value.cols());
        mom.m = b1 * mom.m + (T(1) - b1) * g;
        mom.v = b2 * mom.v + (T(1) - b2) * g.cwiseProduct(g);
        if (lr == T(0)) continue;
        p->value -= lr * wd * p->value;
        p->value.array() -= step_size * mom.m.array() / (mom.v.array().sqrt() * inv_sqrt_bc2 + eps);
    }
}

template <typename T>
std::vector<std::pair<std::string, Mat<T>>> AdamW<T>::export_state() const {
    std::vector<std::pair<std::string, Mat<T>>> out;
    for (const auto& [name, mom] : moments_) {
        out.emplace_back("m/" + name, mom.m);
        out.emplace_back("v/" + name, mom.v);
    }
    return out;
}

template <typename T>
void AdamW<T>::import_state(const std::vector<std::pair<std::string, Mat<T>>>& state, std::int64_t steps) {
    moments_.clear();
    for (const auto& [key, value] : state) {
        if (key.size() < 2 || key[1] != '/') throw std::invalid_argument("bad optimizer state key: " + key);
        auto& mom = moments_[key.substr(2)];
        if (key[0] == 'm') {
            mom.m = value;
        } else if (key[0] == 'v') {
            mom.v = value;
        } else {
            throw std::invalid_argument("bad optimizer state key: " + key);
        }
    }
    step_ = steps;
}

template <typename T>
Mat<T> sinusoidal_embedding(double position, int dim, double max_period) {
    if (dim <= 0 || dim % 2 != 0) throw std::invalid_argument("sinusoidal embedding dimension must be positive and even");
    const int half = dim / 2;
    Mat<T> out(1, dim);
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(max_period) * static_cast<double>(i) / static_cast<double>(half));
        out(0, i) = static_cast<T>(std::cos(position * freq));
        out(0, half + i) = static_cast<T>(std::sin(position * freq));
    }
    return out;
}

template <typename T>
Mat<T> sincos_2d_table(int grid_h, int grid_w, int dim) {
    if (dim % 4 != 0) throw std::invalid_argument("2-D position table width must be divisible by 4");
    Mat<T> table(grid_h * grid_w, dim);
    const int half = dim / 2;
    for (int y = 0; y < grid_h; ++y) {
        for (int x = 0; x < grid_w; ++x) {
            const int row = y * grid_w + x;
            table.row(row).leftCols(half) = sinusoidal_embedding<T>(y, half);
            table.row(row).rightCols(half) = sinusoidal_embedding<T>(x, half);
        }
    }
    return table;
}

template class ParamStore<float>;
template class ParamStore<double>;
template void ParamStore<float>::copy_values_from<float>(const ParamStore<float>&, const std::string&,
                                                         const std::string&);
template void ParamStore<float>::copy_values_from<double>(const ParamStore<double>&, const std::string&,
                                                          const std::string&);
template void ParamStore<double>::copy_values_from<float>(const ParamStore<float>&, const std::string&,
                                                          const std::string&);
template void ParamStore<double>::copy_values_from<double>(const ParamStore<double>&, const std::string&,
                                                           const std::string&);
template struct Linear<float>;
template struct Linear<double>;
template class AdamW<float>;
template class AdamW<double>;
template Mat<float> init_matrix<float>(Eigen::Index, Eigen::Index, Init, Rng&, double);
template Mat<double> init_matrix<double>(Eigen::Index, Eigen::Index, Init, Rng&, double);
template Mat<float> sinusoidal_embedding<float>(double, int, double);
template Mat<double> sinusoidal_embedding<double>(double, int, double);
template Mat<float> sincos_2d_table<float>(int, int, int);
template Mat<double> sincos_2d_table<double>(int, int, int);

}  // namespace dreamclear
