#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "mmctl/autodiff.hpp"
#include "mmctl/tensor.hpp"

namespace mmctl {

template <typename S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;
  bool trainable = true;
};

// Ordered, name-indexed parameter registry. Indices are stable for the
// lifetime of the store, so model structs hold plain ints.
template <typename S>
class ParamStore {
 public:
  int add(std::string name, Matrix<S> init, bool trainable = true) {
    if (index_.count(name)) throw StateError("duplicate parameter name: " + name);
    const int id = static_cast<int>(params_.size());
    index_.emplace(name, id);
    Parameter<S> p;
    p.name = std::move(name);
    p.grad = Tensor<S>::from_matrix(Matrix<S>::Zero(init.rows(), init.cols()));
    p.value = Tensor<S>::from_matrix(std::move(init));
    p.trainable = trainable;
    params_.push_back(std::move(p));
    return id;
  }

  Parameter<S>& operator[](int id) { return params_.at(static_cast<std::size_t>(id)); }
  const Parameter<S>& operator[](int id) const { return params_.at(static_cast<std::size_t>(id)); }

  std::optional<int> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  int id(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw StateError("unknown parameter: " + name);
    return it->second;
  }

  int size() const noexcept { return static_cast<int>(params_.size()); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto& p : params_) p.grad.matrix().setZero();
  }

  Index count_scalars() const {
    Index n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  // Graph leaf for parameter `id`.
  Var bind(Graph<S>& g, int id) const {
    const auto& p = (*this)[id];
    return g.parameter(p.value.matrix(), id, p.trainable);
  }

 private:
  std::vector<Parameter<S>> params_;
  std::map<std::string, int> index_;
};

// Per-parameter gradient sums gathered from one or more graphs; summed in a
// fixed order so accumulation is deterministic.
template <typename S>
class GradBuffer {
 public:
  explicit GradBuffer(int n = 0) : grads_(static_cast<std::size_t>(n)) {}

  void collect(const Graph<S>& g, S weight = S(1)) {
    g.for_each_param_grad([&](int id, const Matrix<S>& gr) {
      auto& dst = grads_.at(static_cast<std::size_t>(id));
      if (dst.size() == 0) dst = Matrix<S>::Zero(gr.rows(), gr.cols());
      dst += weight * gr;
    });
  }

  void add(const GradBuffer& other) {
    for (std::size_t i = 0; i < grads_.size(); ++i) {
      const auto& src = other.grads_[i];
      if (src.size() == 0) continue;
      if (grads_[i].size() == 0) grads_[i] = Matrix<S>::Zero(src.rows(), src.cols());
      grads_[i] += src;
    }
  }

  // Adds the buffered gradients into the store's .grad tensors.
  void apply(ParamStore<S>& store) const {
    for (std::size_t i = 0; i < grads_.size(); ++i) {
      if (grads_[i].size() == 0) continue;
      store[static_cast<int>(i)].grad.matrix() += grads_[i];
    }
  }

  const Matrix<S>& operator[](int id) const { return grads_.at(static_cast<std::size_t>(id)); }

 private:
  std::vector<Matrix<S>> grads_;
};

struct AdamWHyper {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <typename S>
struct AdamState {
  std::vector<Matrix<S>> m;
  std::vector<Matrix<S>> v;
  std::uint64_t step = 0;
};

// AdamW with decoupled weight decay. Frozen parameters are skipped entirely.
template <typename S>
void adamw_step(ParamStore<S>& params, const AdamWHyper& h, AdamState<S>& state) {
  if (!(h.lr > 0.0)) throw ConfigError("adamw: learning rate must be positive");
  const auto n = static_cast<std::size_t>(params.size());
  state.m.resize(n);
  state.v.resize(n);
  state.step += 1;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < n; ++i) {
    auto& p = params[static_cast<int>(i)];
    if (!p.trainable) continue;
    auto& w = p.value.matrix();
    const auto& g = p.grad.matrix();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() == 0) m = Matrix<S>::Zero(w.rows(), w.cols());
    if (v.size() == 0) v = Matrix<S>::Zero(w.rows(), w.cols());
    for (Index k = 0; k < w.size(); ++k) {
      const double gk = g.data()[k];
      const double mk = h.beta1 * m.data()[k] + (1.0 - h.beta1) * gk;
      const double vk = h.beta2 * v.data()[k] + (1.0 - h.beta2) * gk * gk;
      m.data()[k] = static_cast<S>(mk);
      v.data()[k] = static_cast<S>(vk);
      const double mhat = mk / bc1;
      const double vhat = vk / bc2;
      double wk = w.data()[k];
      wk -= h.lr * h.weight_decay * wk;
      wk -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
      w.data()[k] = static_cast<S>(wk);
    }
  }
}

// Linear warmup to `peak` over `warmup` steps, then half-cosine decay to 0 at
// `total`.
inline double cosine_lr(std::uint64_t step, std::uint64_t total, double peak, std::uint64_t warmup) {
  if (warmup >= total) throw ConfigError("cosine_lr: warmup must be shorter than total");
  if (step > total) throw InputError("cosine_lr: step beyond schedule end");
  if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return 0.5 * peak * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace mmctl
