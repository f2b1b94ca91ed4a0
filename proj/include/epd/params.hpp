#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "epd/autodiff.hpp"
#include "epd/rng.hpp"
#include "epd/tensor.hpp"

namespace epd {

// Named parameter tensors in fixed insertion order. Insertion order is the
// serialization and traversal order, so runs are reproducible.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor init) {
    if (index_.count(name)) throw DataError("param already registered: " + name);
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(init));
    return items_.back().second;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Tensor& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("unknown param: " + name);
    return items_[it->second].second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("unknown param: " + name);
    return items_[it->second].second;
  }

  std::size_t size() const { return items_.size(); }
  const std::pair<std::string, Tensor>& item(std::size_t i) const { return items_[i]; }
  std::pair<std::string, Tensor>& item(std::size_t i) { return items_[i]; }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("unknown param: " + name);
    return it->second;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [k, t] : items_) n += t.numel();
    return n;
  }

  bool all_finite() const {
    for (const auto& [k, t] : items_)
      if (!t.all_finite()) return false;
    return true;
  }

  // Same names and shapes, zero-filled. Used for gradient accumulation and
  // optimizer moments.
  ParamStore zeros_like() const {
    ParamStore z;
    for (const auto& [k, t] : items_) z.add(k, Tensor(t.shape));
    return z;
  }

  // FNV-1a over the raw bytes of every tensor, in insertion order. Used by
  // the stage-freezing tests and checkpoint integrity.
  std::uint64_t content_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const void* p, std::size_t n) {
      const unsigned char* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 0x100000001b3ULL;
      }
    };
    for (const auto& [k, t] : items_) {
      feed(k.data(), k.size());
      feed(t.data.data(), t.data.size() * sizeof(double));
    }
    return h;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Per-tape binding of a ParamStore: one leaf Var per parameter. Models take a
// Binding so the same forward code serves training (grads read off the tape)
// and plain evaluation (scratch tape, values only).
class Binding {
 public:
  Binding(Tape& tape, const ParamStore& params) : params_(&params) {
    vars_.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
      vars_.push_back(tape.leaf(params.item(i).second));
  }

  Var operator[](const std::string& name) const { return vars_[params_->index_of(name)]; }

  // Collect gradients from the tape into a store shaped like the params.
  ParamStore grads(const Tape& tape) const {
    ParamStore g;
    for (std::size_t i = 0; i < params_->size(); ++i) {
      const Tensor& gt = tape.grad(vars_[i]);
      g.add(params_->item(i).first,
            gt.numel() ? gt : Tensor(params_->item(i).second.shape));
    }
    return g;
  }

  // Accumulate this binding's gradients into an existing store.
  void add_grads_into(const Tape& tape, ParamStore& acc) const {
    for (std::size_t i = 0; i < params_->size(); ++i) {
      const Tensor& gt = tape.grad(vars_[i]);
      if (gt.numel() == 0) continue;
      Tensor& dst = acc.at(params_->item(i).first);
      for (std::size_t j = 0; j < dst.numel(); ++j) dst.data[j] += gt.data[j];
    }
  }

 private:
  const ParamStore* params_;
  std::vector<Var> vars_;
};

// Gaussian init scaled by 1/sqrt(fan_in), the default for all weight
// matrices; biases start at zero.
inline Tensor glorot_init(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Tensor t = rng.normal_tensor(r, c);
  const double s = scale / std::sqrt(static_cast<double>(r));
  for (double& v : t.data) v *= s;
  return t;
}

}  // namespace epd
