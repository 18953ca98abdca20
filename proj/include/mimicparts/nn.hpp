#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "mimicparts/autograd.hpp"

namespace mimicparts {

// Named parameter set with per-parameter Adam state. Declaration happens at
// model construction; forward passes bind parameters onto a tape.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor adam_m;
    Tensor adam_v;
  };

  Tensor& declare(const std::string& name, Tensor init);
  bool has(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  void set(const std::string& name, Tensor value);

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  // Declaration order; Adam steps and gradient reductions iterate this.
  std::vector<std::string> names() const;
  int64_t total_params() const;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

using NamedGrads = std::map<std::string, Tensor>;

// Binds store parameters as leaves on one tape. One binding per tape; with
// per-sample tapes on worker threads each thread owns its binding.
class ParamBinding {
 public:
  ParamBinding(Tape& tape, const ParamStore& store, bool trainable = true)
      : tape_(&tape), store_(&store), trainable_(trainable) {}

  Var operator()(const std::string& name);
  Tape& tape() const { return *tape_; }

  // Injects an existing variable for a parameter name (gradient checking).
  void preset(const std::string& name, Var v) { bound_[name] = v; }

  // Adds this tape's parameter gradients into `out` (declaration order).
  void accumulate_grads(const GradMap& grads, NamedGrads& out) const;

 private:
  Tape* tape_;
  const ParamStore* store_;
  bool trainable_;
  std::unordered_map<std::string, Var> bound_;
};

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamStore& store, const NamedGrads& grads);
  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

namespace init {
Tensor zeros(Shape shape);
Tensor ones(Shape shape);
// Xavier/Glorot uniform for a [in, out] weight.
Tensor xavier(int in, int out, Rng& rng);
// Kaiming-style init for conv kernels [K, Cin, Cout].
Tensor conv_kernel(int k, int cin, int cout, Rng& rng);
Tensor normal(Shape shape, Rng& rng, double stdev);
}  // namespace init

namespace nn {

// Declares weight+bias under `prefix`. apply_* fetches them via a binding.
void declare_linear(ParamStore& store, const std::string& prefix, int in, int out, Rng& rng);
Var linear(ParamBinding& p, const std::string& prefix, Var x);  // rank 2 or 3 input

void declare_layer_norm(ParamStore& store, const std::string& prefix, int dim);
Var layer_norm(ParamBinding& p, const std::string& prefix, Var x);

// Multi-head attention over [B, T, d] tokens. kv may come from a different
// stream (cross-attention). d must be divisible by heads.
void declare_attention(ParamStore& store, const std::string& prefix, int d_model,
                       int d_kv, Rng& rng);
Var attention(ParamBinding& p, const std::string& prefix, Var queries, Var keys_values,
              int heads);

void declare_ffn(ParamStore& store, const std::string& prefix, int d_model, int d_hidden,
                 Rng& rng);
Var ffn(ParamBinding& p, const std::string& prefix, Var x);

// Pre-LN transformer encoder layer: x + Att(LN(x)), then x + FFN(LN(x)).
void declare_transformer_layer(ParamStore& store, const std::string& prefix, int d_model,
                               int d_hidden, Rng& rng);
Var transformer_layer(ParamBinding& p, const std::string& prefix, Var x, int heads);

// Fixed sinusoidal position table [T, d].
Tensor sinusoidal_table(int t_len, int dim);
// Sinusoidal embeddings of integer timesteps -> [n, dim].
Tensor timestep_embedding(const std::vector<int>& steps, int dim);

}  // namespace nn

}  // namespace mimicparts
