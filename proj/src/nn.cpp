#include "mimicparts/nn.hpp"

#include <cmath>

namespace mimicparts {

Tensor& ParamStore::declare(const std::string& name, Tensor init) {
  MP_REQUIRE(!has(name), "parameter redeclared: " + name);
  Entry e;
  e.name = name;
  e.adam_m = Tensor::zeros(init.shape());
  e.adam_v = Tensor::zeros(init.shape());
  e.value = std::move(init);
  index_[name] = entries_.size();
  entries_.push_back(std::move(e));
  return entries_.back().value;
}

bool ParamStore::has(const std::string& name) const { return index_.count(name) > 0; }

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  MP_REQUIRE(it != index_.end(), "unknown parameter: " + name);
  return entries_[it->second].value;
}

void ParamStore::set(const std::string& name, Tensor value) {
  auto it = index_.find(name);
  MP_REQUIRE(it != index_.end(), "unknown parameter: " + name);
  MP_REQUIRE(value.same_shape(entries_[it->second].value),
             "parameter shape change for " + name);
  entries_[it->second].value = std::move(value);
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

int64_t ParamStore::total_params() const {
  int64_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

Var ParamBinding::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  Var v = tape_->leaf(store_->get(name), trainable_);
  bound_.emplace(name, v);
  return v;
}

void ParamBinding::accumulate_grads(const GradMap& grads, NamedGrads& out) const {
  for (const auto& e : store_->entries()) {
    auto it = bound_.find(e.name);
    if (it == bound_.end() || !grads.has(it->second)) continue;
    Tensor g = grads.at(it->second);
    auto dst = out.find(e.name);
    if (dst == out.end()) {
      out.emplace(e.name, std::move(g));
    } else {
      dst->second = ops::add(dst->second, g);
    }
  }
}

void Adam::step(ParamStore& store, const NamedGrads& grads) {
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& e : store.entries()) {
    auto it = grads.find(e.name);
    if (it == grads.end()) continue;
    auto gv = it->second.data();
    auto mv = e.adam_m.data();
    auto vv = e.adam_v.data();
    auto pv = e.value.data();
    std::vector<double> m(gv.size()), v(gv.size()), p(gv.size());
    for (size_t i = 0; i < gv.size(); ++i) {
      m[i] = beta1_ * mv[i] + (1.0 - beta1_) * gv[i];
      v[i] = beta2_ * vv[i] + (1.0 - beta2_) * gv[i] * gv[i];
      double mh = m[i] / bc1;
      double vh = v[i] / bc2;
      p[i] = pv[i] - lr_ * mh / (std::sqrt(vh) + eps_);
    }
    e.adam_m = Tensor(e.adam_m.shape(), std::move(m));
    e.adam_v = Tensor(e.adam_v.shape(), std::move(v));
    e.value = Tensor(e.value.shape(), std::move(p));
  }
}

namespace init {

Tensor zeros(Shape shape) { return Tensor::zeros(std::move(shape)); }
Tensor ones(Shape shape) { return Tensor::full(std::move(shape), 1.0); }

Tensor xavier(int in, int out, Rng& rng) {
  double bound = std::sqrt(6.0 / (in + out));
  return Tensor::uniform({in, out}, rng, -bound, bound);
}

Tensor conv_kernel(int k, int cin, int cout, Rng& rng) {
  double bound = std::sqrt(6.0 / (k * cin + k * cout));
  return Tensor::uniform({k, cin, cout}, rng, -bound, bound);
}

Tensor normal(Shape shape, Rng& rng, double stdev) {
  return Tensor::randn(std::move(shape), rng, stdev);
}

}  // namespace init

namespace nn {

void declare_linear(ParamStore& store, const std::string& prefix, int in, int out, Rng& rng) {
  store.declare(prefix + ".w", init::xavier(in, out, rng));
  store.declare(prefix + ".b", init::zeros({out}));
}

Var linear(ParamBinding& p, const std::string& prefix, Var x) {
  Var w = p(prefix + ".w");
  Var b = p(prefix + ".b");
  Shape xs = x.value().shape();
  if (xs.size() == 2) return add(matmul(x, w), b);
  MP_REQUIRE(xs.size() == 3, "linear expects rank-2 or rank-3 input");
  int bsz = xs[0], t = xs[1], in = xs[2];
  int out = w.value().dim(1);
  Var flat = reshape(x, {bsz * t, in});
  Var y = add(matmul(flat, w), b);
  return reshape(y, {bsz, t, out});
}

void declare_layer_norm(ParamStore& store, const std::string& prefix, int dim) {
  store.declare(prefix + ".gain", init::ones({dim}));
  store.declare(prefix + ".bias", init::zeros({dim}));
}

Var layer_norm(ParamBinding& p, const std::string& prefix, Var x) {
  return layer_norm_rows(x, p(prefix + ".gain"), p(prefix + ".bias"));
}

void declare_attention(ParamStore& store, const std::string& prefix, int d_model, int d_kv,
                       Rng& rng) {
  declare_linear(store, prefix + ".q", d_model, d_model, rng);
  declare_linear(store, prefix + ".k", d_kv, d_model, rng);
  declare_linear(store, prefix + ".v", d_kv, d_model, rng);
  declare_linear(store, prefix + ".o", d_model, d_model, rng);
}

Var attention(ParamBinding& p, const std::string& prefix, Var queries, Var keys_values,
              int heads) {
  Shape qs = queries.value().shape();
  MP_REQUIRE(qs.size() == 3, "attention expects [B, T, d] queries");
  int d = qs[2];
  MP_REQUIRE(d % heads == 0, "attention width not divisible by head count");
  int w = d / heads;

  Var q = linear(p, prefix + ".q", queries);
  Var k = linear(p, prefix + ".k", keys_values);
  Var v = linear(p, prefix + ".v", keys_values);

  std::vector<int> head_sizes(heads, w);
  auto qh = split(q, 2, head_sizes);
  auto kh = split(k, 2, head_sizes);
  auto vh = split(v, 2, head_sizes);

  double scale_factor = 1.0 / std::sqrt(static_cast<double>(w));
  std::vector<Var> outs;
  outs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    Var scores = scale(bmm(qh[h], kh[h], false, true), scale_factor);
    Var probs = softmax_rows(scores);
    outs.push_back(bmm(probs, vh[h]));
  }
  Var merged = concat(outs, 2);
  return linear(p, prefix + ".o", merged);
}

void declare_ffn(ParamStore& store, const std::string& prefix, int d_model, int d_hidden,
                 Rng& rng) {
  declare_linear(store, prefix + ".in", d_model, d_hidden, rng);
  declare_linear(store, prefix + ".out", d_hidden, d_model, rng);
}

Var ffn(ParamBinding& p, const std::string& prefix, Var x) {
  return linear(p, prefix + ".out", gelu(linear(p, prefix + ".in", x)));
}

void declare_transformer_layer(ParamStore& store, const std::string& prefix, int d_model,
                               int d_hidden, Rng& rng) {
  declare_layer_norm(store, prefix + ".ln1", d_model);
  declare_attention(store, prefix + ".att", d_model, d_model, rng);
  declare_layer_norm(store, prefix + ".ln2", d_model);
  declare_ffn(store, prefix + ".ffn", d_model, d_hidden, rng);
}

Var transformer_layer(ParamBinding& p, const std::string& prefix, Var x, int heads) {
  Var h = layer_norm(p, prefix + ".ln1", x);
  x = add(x, attention(p, prefix + ".att", h, h, heads));
  Var h2 = layer_norm(p, prefix + ".ln2", x);
  return add(x, ffn(p, prefix + ".ffn", h2));
}

Tensor sinusoidal_table(int t_len, int dim) {
  std::vector<double> d(static_cast<int64_t>(t_len) * dim);
  for (int t = 0; t < t_len; ++t) {
    for (int j = 0; j < dim; ++j) {
      int pair = j / 2;
      double freq = std::pow(10000.0, -2.0 * pair / dim);
      double angle = t * freq;
      d[static_cast<int64_t>(t) * dim + j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor({t_len, dim}, std::move(d));
}

Tensor timestep_embedding(const std::vector<int>& steps, int dim) {
  int n = static_cast<int>(steps.size());
  std::vector<double> d(static_cast<int64_t>(n) * dim);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < dim; ++j) {
      int pair = j / 2;
      double freq = std::pow(10000.0, -2.0 * pair / dim);
      double angle = steps[i] * freq;
      d[static_cast<int64_t>(i) * dim + j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor({n, dim}, std::move(d));
}

}  // namespace nn

}  // namespace mimicparts
