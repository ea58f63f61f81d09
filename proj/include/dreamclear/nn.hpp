#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dreamclear/autograd.hpp"
#include "dreamclear/random.hpp"

namespace dreamclear {

/// Named, ordered collection of parameter leaves.
template <typename T>
class ParamStore {
public:
    ag::Var<T> add(const std::string& name, Mat<T> init);
    ag::Var<T> get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const std::vector<std::pair<std::string, ag::Var<T>>>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    std::size_t num_scalars() const;

    void zero_grad();
    /// Marks every parameter whose name starts with one of the prefixes as
    /// trainable and all others as frozen. An empty prefix matches everything.
    void set_trainable(const std::vector<std::string>& prefixes);
    void set_all_trainable(bool trainable);

    /// Copies values by name from a store of another precision. Every name in
    /// this store must exist in `other` with the same shape.
    template <typename U>
    void copy_values_from(const ParamStore<U>& other, const std::string& src_prefix = "",
                          const std::string& dst_prefix = "");

private:
    std::vector<std::pair<std::string, ag::Var<T>>> entries_;
    std::map<std::string, std::size_t> index_;
};

enum class Init { zero, xavier, normal };

template <typename T>
Mat<T> init_matrix(Eigen::Index rows, Eigen::Index cols, Init init, Rng& rng, double stddev = 0.02);

template <typename T>
struct Linear {
    ag::Var<T> weight;  // in x out
    ag::Var<T> bias;    // 1 x out

    Linear() = default;
    Linear(ParamStore<T>& store, const std::string& name, int in, int out, Init init, Rng& rng);
    /// Binds to parameters already present in the store.
    static Linear bind(const ParamStore<T>& store, const std::string& name);

    ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::linear(x, weight, bias); }
    int in_features() const { return static_cast<int>(weight->rows()); }
    int out_features() const { return static_cast<int>(weight->cols()); }
};

struct AdamWConfig {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double max_grad_norm = 0.0;  // 0 disables clipping
};

/// Adam with decoupled weight decay. Only parameters with requires_grad set
/// are updated; frozen ones are never touched.
template <typename T>
class AdamW {
public:
    explicit AdamW(AdamWConfig config) : config_(config) {}

    void step(ParamStore<T>& store);
    std::int64_t steps_taken() const { return step_; }
    const AdamWConfig& config() const { return config_; }
    void set_lr(double lr) { config_.lr = lr; }

    /// Moment buffers as named matrices ("m/<param>", "v/<param>") for checkpoints.
    std::vector<std::pair<std::string, Mat<T>>> export_state() const;
    void import_state(const std::vector<std::pair<std::string, Mat<T>>>& state, std::int64_t steps);

private:
    struct Moments {
        Mat<T> m;
        Mat<T> v;
    };
    AdamWConfig config_;
    std::int64_t step_ = 0;
    std::map<std::string, Moments> moments_;
};

/// 1-D sinusoidal embedding of a scalar position; dim must be even.
template <typename T>
Mat<T> sinusoidal_embedding(double position, int dim, double max_period = 10000.0);

/// Fixed 2-D sin-cos position table for a grid_h x grid_w token grid (N x dim).
template <typename T>
Mat<T> sincos_2d_table(int grid_h, int grid_w, int dim);

}  // namespace dreamclear
