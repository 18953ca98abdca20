#include "mimicparts/rvq.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "mimicparts/io.hpp"

namespace mimicparts {

Codebooks::Codebooks(int num_layers, int size, int dim) : size_(size), dim_(dim) {
  MP_REQUIRE(num_layers >= 1 && size >= 1 && dim >= 1, "bad codebook dimensions");
  entries_.resize(num_layers);
  usage_.assign(num_layers, std::vector<double>(size, 0.0));
  ema_sum_.assign(num_layers, std::vector<double>(static_cast<size_t>(size) * dim, 0.0));
}

const Tensor& Codebooks::layer(int v) const {
  MP_REQUIRE(v >= 0 && v < num_layers(), "codebook layer out of range");
  MP_REQUIRE(!entries_[v].empty(), "codebook layer " + std::to_string(v) + " is empty");
  return entries_[v];
}

void Codebooks::set_layer(int v, Tensor entries) {
  MP_REQUIRE(v >= 0 && v < num_layers(), "codebook layer out of range");
  MP_REQUIRE(entries.rank() == 2 && entries.dim(0) == size_ && entries.dim(1) == dim_,
             "codebook entries must be [K, d]");
  MP_REQUIRE(entries.all_finite(), "codebook entries must be finite");
  entries_[v] = std::move(entries);
  initialized_ = true;
}

void Codebooks::init_from_latents(const Tensor& latents, Rng& rng) {
  Tensor tokens = latents.rank() == 2
                      ? latents
                      : latents.reshaped({static_cast<int>(latents.numel() / dim_), dim_});
  MP_REQUIRE(tokens.dim(1) == dim_, "latent dim does not match codebook dim");
  int n = tokens.dim(0);
  Tensor residual = tokens;
  for (int v = 0; v < num_layers(); ++v) {
    std::vector<double> d(static_cast<size_t>(size_) * dim_);
    for (int k = 0; k < size_; ++k) {
      int row = rng.uniform_int(0, n - 1);
      for (int j = 0; j < dim_; ++j) {
        d[static_cast<size_t>(k) * dim_ + j] = residual(row, j) + 1e-4 * rng.normal();
      }
    }
    entries_[v] = Tensor({size_, dim_}, std::move(d));
    std::fill(usage_[v].begin(), usage_[v].end(), 1.0);
    auto ev = entries_[v].data();
    std::copy(ev.begin(), ev.end(), ema_sum_[v].begin());
    QuantizeResult q = quantize_layer(residual, entries_[v]);
    residual = ops::sub(residual, q.z);
  }
  initialized_ = true;
}

void Codebooks::ema_update(int v, const Tensor& residual_tokens,
                           const std::vector<int>& indices, double decay,
                           double dead_threshold, Rng& rng) {
  Tensor tokens = residual_tokens.rank() == 2
                      ? residual_tokens
                      : residual_tokens.reshaped(
                            {static_cast<int>(residual_tokens.numel() / dim_), dim_});
  int n = tokens.dim(0);
  MP_REQUIRE(static_cast<size_t>(n) == indices.size(), "index count mismatch");

  std::vector<double> counts(size_, 0.0);
  std::vector<double> sums(static_cast<size_t>(size_) * dim_, 0.0);
  auto tv = tokens.data();
  for (int i = 0; i < n; ++i) {
    int k = indices[i];
    counts[k] += 1.0;
    for (int j = 0; j < dim_; ++j) sums[static_cast<size_t>(k) * dim_ + j] += tv[i * dim_ + j];
  }
  auto& usage = usage_[v];
  auto& ema = ema_sum_[v];
  std::vector<double> d(static_cast<size_t>(size_) * dim_);
  auto ev = entries_[v].data();
  for (int k = 0; k < size_; ++k) {
    usage[k] = decay * usage[k] + (1.0 - decay) * counts[k];
    for (int j = 0; j < dim_; ++j) {
      size_t o = static_cast<size_t>(k) * dim_ + j;
      ema[o] = decay * ema[o] + (1.0 - decay) * sums[o];
      d[o] = usage[k] > 1e-9 ? ema[o] / usage[k] : ev[o];
    }
  }
  // Reseed entries whose EMA usage fell below the threshold.
  for (int k = 0; k < size_; ++k) {
    if (usage[k] >= dead_threshold) continue;
    int row = rng.uniform_int(0, n - 1);
    for (int j = 0; j < dim_; ++j) {
      size_t o = static_cast<size_t>(k) * dim_ + j;
      d[o] = tv[row * dim_ + j];
      ema[o] = d[o];
    }
    usage[k] = 1.0;
  }
  entries_[v] = Tensor({size_, dim_}, std::move(d));
}

void Codebooks::restore_stats(int v, std::vector<double> usage, std::vector<double> ema_sum) {
  MP_REQUIRE(v >= 0 && v < num_layers(), "codebook layer out of range");
  MP_REQUIRE(usage.size() == static_cast<size_t>(size_), "usage size mismatch");
  MP_REQUIRE(ema_sum.size() == static_cast<size_t>(size_) * dim_, "ema sum size mismatch");
  usage_[v] = std::move(usage);
  ema_sum_[v] = std::move(ema_sum);
}

int Codebooks::dead_entries(int v, double threshold) const {
  int n = 0;
  for (double u : usage_[v]) {
    if (u < threshold) ++n;
  }
  return n;
}

QuantizeResult quantize_layer(const Tensor& residual, const Tensor& codebook) {
  MP_REQUIRE(codebook.rank() == 2 && codebook.dim(0) >= 1, "empty codebook layer");
  int dim = codebook.dim(1);
  MP_REQUIRE(residual.shape().back() == dim,
             "residual dim " + std::to_string(residual.shape().back()) +
                 " does not match codebook dim " + std::to_string(dim));
  int k_entries = codebook.dim(0);
  int64_t n_tokens = residual.numel() / dim;
  auto rv = residual.data();
  auto cv = codebook.data();

  QuantizeResult out;
  out.indices.resize(n_tokens);
  std::vector<double> z(residual.numel());
  for (int64_t i = 0; i < n_tokens; ++i) {
    const double* r = rv.data() + i * dim;
    double best = std::numeric_limits<double>::infinity();
    int best_k = 0;
    for (int k = 0; k < k_entries; ++k) {
      const double* e = cv.data() + static_cast<int64_t>(k) * dim;
      double dist = 0.0;
      for (int j = 0; j < dim; ++j) {
        double diff = r[j] - e[j];
        dist += diff * diff;
      }
      if (dist < best) {  // strict: ties keep the lowest index
        best = dist;
        best_k = k;
      }
    }
    out.indices[i] = best_k;
    const double* e = cv.data() + static_cast<int64_t>(best_k) * dim;
    std::copy(e, e + dim, z.data() + i * dim);
  }
  out.z = Tensor(residual.shape(), std::move(z));
  return out;
}

RqResult rq_forward(const Tensor& latent, const Codebooks& books, RqMode mode,
                    double quantizer_dropout, Rng* rng) {
  MP_REQUIRE(books.initialized(), "codebooks are not initialized");
  int v_total = books.num_layers();
  RqResult out;
  out.depth = v_total;
  if (mode == RqMode::train && rng != nullptr && quantizer_dropout > 0.0) {
    if (rng->uniform() < quantizer_dropout) {
      out.truncated = true;
      out.depth = rng->uniform_int(1, v_total);
    }
  }

  Tensor sum = Tensor::zeros(latent.shape());
  Tensor residual = latent;
  for (int v = 0; v < out.depth; ++v) {
    out.layer_residuals.push_back(residual);
    QuantizeResult q = quantize_layer(residual, books.layer(v));
    out.layer_indices.push_back(std::move(q.indices));
    sum = ops::add(sum, q.z);
    out.layer_z.push_back(std::move(q.z));
    // Single subtraction from the input keeps the telescoping identity
    // bitwise: r^{v+1} = r^1 - sum_{w<=v} z^w.
    residual = ops::sub(latent, sum);
  }
  out.quantized_sum = std::move(sum);
  out.final_residual = std::move(residual);
  return out;
}

std::vector<Var> residual_vars(Tape& tape, Var latent, const std::vector<Tensor>& quantized) {
  std::vector<Var> out;
  Tensor partial = Tensor::zeros(latent.value().shape());
  for (size_t v = 0; v < quantized.size(); ++v) {
    out.push_back(v == 0 ? latent : sub(latent, tape.constant(partial)));
    partial = ops::add(partial, quantized[v]);
  }
  return out;
}

Var rvq_loss(Tape& tape, Var m, Var m_hat, const std::vector<Var>& residuals,
             const std::vector<Tensor>& quantized, double beta) {
  MP_REQUIRE(beta >= 0.0, "beta must be non-negative");
  MP_REQUIRE(residuals.size() == quantized.size(), "residual/quantized layer count mismatch");
  Var loss = l1_loss(m_hat, m);
  if (beta == 0.0) return loss;
  for (size_t v = 0; v < residuals.size(); ++v) {
    loss = add(loss, scale(mse(residuals[v], tape.constant(quantized[v])), beta));
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Codec model
// ---------------------------------------------------------------------------

namespace {

void declare_conv(ParamStore& store, const std::string& name, int k, int cin, int cout,
                  Rng& rng) {
  store.declare(name + ".w", init::conv_kernel(k, cin, cout, rng));
  store.declare(name + ".b", init::zeros({cout}));
}

Var conv(ParamBinding& p, const std::string& name, Var x, int stride, int pad) {
  return conv1d(x, p(name + ".w"), p(name + ".b"), stride, pad);
}

Var res_block(ParamBinding& p, const std::string& name, Var x) {
  Var h = gelu(conv(p, name + ".a", x, 1, 1));
  return add(x, conv(p, name + ".b", h, 1, 1));
}

}  // namespace

RvqModel::RvqModel(RvqConfig cfg, int channels, uint64_t init_seed)
    : cfg_(cfg), channels_(channels),
      books_(cfg.num_layers, cfg.codebook_size, cfg.latent_dim) {
  MP_REQUIRE(channels >= 1, "codec needs at least one channel");
  Rng rng(derive_seed(init_seed, 0xc0de));
  int h = cfg_.hidden, d = cfg_.latent_dim;
  declare_conv(params_, "enc.in", 3, channels, h, rng);
  declare_conv(params_, "enc.down1", 4, h, h, rng);
  declare_conv(params_, "enc.rb1.a", 3, h, h, rng);
  declare_conv(params_, "enc.rb1.b", 3, h, h, rng);
  declare_conv(params_, "enc.down2", 4, h, h, rng);
  declare_conv(params_, "enc.rb2.a", 3, h, h, rng);
  declare_conv(params_, "enc.rb2.b", 3, h, h, rng);
  declare_conv(params_, "enc.out", 3, h, d, rng);

  declare_conv(params_, "dec.in", 3, d, h, rng);
  declare_conv(params_, "dec.rb1.a", 3, h, h, rng);
  declare_conv(params_, "dec.rb1.b", 3, h, h, rng);
  declare_conv(params_, "dec.up1", 3, h, h, rng);
  declare_conv(params_, "dec.rb2.a", 3, h, h, rng);
  declare_conv(params_, "dec.rb2.b", 3, h, h, rng);
  declare_conv(params_, "dec.up2", 3, h, h, rng);
  declare_conv(params_, "dec.out", 3, h, channels, rng);
}

Var RvqModel::encode(ParamBinding& p, Var x) const {
  Shape s = x.value().shape();
  MP_REQUIRE(s.size() == 3 && s[2] == channels_, "encode expects [B, T, C]");
  MP_REQUIRE(s[1] % RvqConfig::downscale == 0,
             "clip length " + std::to_string(s[1]) + " not divisible by the downscale 4");
  Var h = gelu(conv(p, "enc.in", x, 1, 1));
  h = gelu(conv(p, "enc.down1", h, 2, 1));
  h = res_block(p, "enc.rb1", h);
  h = gelu(conv(p, "enc.down2", h, 2, 1));
  h = res_block(p, "enc.rb2", h);
  return conv(p, "enc.out", h, 1, 1);
}

Var RvqModel::decode(ParamBinding& p, Var z) const {
  Shape s = z.value().shape();
  MP_REQUIRE(s.size() == 3 && s[2] == cfg_.latent_dim, "decode expects [B, n, d]");
  Var h = gelu(conv(p, "dec.in", z, 1, 1));
  h = res_block(p, "dec.rb1", h);
  h = gelu(conv(p, "dec.up1", upsample2(h), 1, 1));
  h = res_block(p, "dec.rb2", h);
  h = gelu(conv(p, "dec.up2", upsample2(h), 1, 1));
  return conv(p, "dec.out", h, 1, 1);
}

Tensor RvqModel::encode_eval(const Tensor& part) const {
  MP_REQUIRE(part.rank() == 2, "encode_eval expects [T, C]");
  Tape tape(false);
  ParamBinding p(tape, params_, false);
  Var x = tape.constant(part.reshaped({1, part.dim(0), part.dim(1)}));
  Tensor z = encode(p, x).value();
  return z.reshaped({z.dim(1), z.dim(2)});
}

Tensor RvqModel::decode_eval(const Tensor& latent) const {
  MP_REQUIRE(latent.rank() == 2, "decode_eval expects [n, d]");
  Tape tape(false);
  ParamBinding p(tape, params_, false);
  Var z = tape.constant(latent.reshaped({1, latent.dim(0), latent.dim(1)}));
  Tensor x = decode(p, z).value();
  return x.reshaped({x.dim(1), x.dim(2)});
}

Tensor RvqModel::reconstruct(const Tensor& part) const {
  Tensor z = encode_eval(part);
  RqResult rq = rq_forward(z, books_, RqMode::eval, 0.0, nullptr);
  return decode_eval(rq.quantized_sum);
}

void RvqModel::init_codebooks(const std::vector<Tensor>& parts, uint64_t seed) {
  MP_REQUIRE(!parts.empty(), "init_codebooks: empty sample set");
  Rng rng(derive_seed(seed, 0xb00c));
  int take = std::min<int>(static_cast<int>(parts.size()), 8);
  std::vector<Tensor> latents;
  for (int i = 0; i < take; ++i) latents.push_back(encode_eval(parts[i]));
  Tensor stacked = ops::concat(latents, 0);
  books_.init_from_latents(stacked, rng);
}

void RvqModel::save(const std::filesystem::path& path, const nlohmann::json& extra_meta) const {
  ParamStore ser = params_;
  for (int v = 0; v < books_.num_layers(); ++v) {
    std::string base = "codebook." + std::to_string(v);
    ser.declare(base + ".entries", books_.layer(v));
    const auto& usage = books_.usage(v);
    ser.declare(base + ".usage", Tensor({static_cast<int>(usage.size())},
                                        std::vector<double>(usage.begin(), usage.end())));
    const auto& ema = books_.ema_sum(v);
    ser.declare(base + ".ema", Tensor({static_cast<int>(ema.size())},
                                      std::vector<double>(ema.begin(), ema.end())));
  }
  nlohmann::json meta = extra_meta;
  meta["kind"] = "rvq";
  meta["channels"] = channels_;
  meta["config"] = {{"num_layers", cfg_.num_layers},
                    {"codebook_size", cfg_.codebook_size},
                    {"latent_dim", cfg_.latent_dim},
                    {"hidden", cfg_.hidden},
                    {"beta", cfg_.beta},
                    {"quantizer_dropout", cfg_.quantizer_dropout},
                    {"ema_decay", cfg_.ema_decay},
                    {"dead_usage_threshold", cfg_.dead_usage_threshold}};
  meta["codebooks_initialized"] = books_.initialized();
  io::save_checkpoint(path, meta, ser);
}

RvqModel RvqModel::load_from(const std::filesystem::path& path, nlohmann::json* meta_out) {
  io::Checkpoint ck = io::load_checkpoint(path);
  MP_REQUIRE(ck.meta.value("kind", "") == "rvq", "checkpoint is not an rvq model");
  const auto& jc = ck.meta.at("config");
  RvqConfig cfg;
  cfg.num_layers = jc.at("num_layers");
  cfg.codebook_size = jc.at("codebook_size");
  cfg.latent_dim = jc.at("latent_dim");
  cfg.hidden = jc.at("hidden");
  cfg.beta = jc.at("beta");
  cfg.quantizer_dropout = jc.at("quantizer_dropout");
  cfg.ema_decay = jc.at("ema_decay");
  cfg.dead_usage_threshold = jc.at("dead_usage_threshold");
  RvqModel model(cfg, ck.meta.at("channels"), 0);

  bool books_ready = ck.meta.value("codebooks_initialized", false);
  std::map<int, std::vector<double>> pending_usage, pending_ema;
  for (auto& e : ck.params.entries()) {
    if (e.name.rfind("codebook.", 0) == 0) {
      if (!books_ready) continue;
      auto dot = e.name.find('.', 9);
      int v = std::stoi(e.name.substr(9, dot - 9));
      std::string field = e.name.substr(dot + 1);
      if (field == "entries") {
        model.books_.set_layer(v, e.value);
      } else if (field == "usage") {
        pending_usage[v] = std::vector<double>(e.value.data().begin(), e.value.data().end());
      } else if (field == "ema") {
        pending_ema[v] = std::vector<double>(e.value.data().begin(), e.value.data().end());
      }
    } else {
      model.params_.set(e.name, e.value);
      // Restore Adam moments for resumable training.
      for (auto& dst : model.params_.entries()) {
        if (dst.name == e.name) {
          dst.adam_m = e.adam_m;
          dst.adam_v = e.adam_v;
          break;
        }
      }
    }
  }
  for (auto& [v, usage] : pending_usage) {
    auto it = pending_ema.find(v);
    if (books_ready && it != pending_ema.end()) {
      model.books_.restore_stats(v, std::move(usage), std::move(it->second));
    }
  }
  return model;
}

void save_rq_indices(const std::filesystem::path& path, const RqResult& rq) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error::io("cannot write " + path.string());
  f.write("MPQI", 4);
  nlohmann::json meta;
  meta["layers"] = rq.layer_indices.size();
  meta["tokens"] = rq.layer_indices.empty() ? 0 : rq.layer_indices[0].size();
  io::write_json_block(f, meta);
  for (const auto& layer : rq.layer_indices) {
    for (int idx : layer) {
      MP_REQUIRE(idx >= 0 && idx < 65536, "index does not fit u16");
      uint16_t v = static_cast<uint16_t>(idx);
      f.write(reinterpret_cast<const char*>(&v), 2);
    }
  }
  if (!f) throw Error::io("short write to " + path.string());
}

std::vector<TrainLogEntry> train_rvq(RvqModel& model, const std::vector<Tensor>& parts,
                                     const RvqTrainConfig& tc, uint64_t seed,
                                     const std::function<void(const TrainLogEntry&)>& on_step,
                                     Adam* optimizer, Rng* external_rng) {
  MP_REQUIRE(!parts.empty(), "train_rvq: empty dataset");
  int t_frames = parts[0].dim(0);
  int channels = parts[0].dim(1);
  for (const auto& p : parts) {
    MP_REQUIRE(p.rank() == 2 && p.dim(0) == t_frames && p.dim(1) == channels,
               "train_rvq: clips must share shape");
  }
  const RvqConfig& cfg = model.config();
  Rng local_rng(derive_seed(seed, 0x3f2));
  Rng& rng = external_rng ? *external_rng : local_rng;
  Adam local_adam(tc.lr);
  Adam& adam = optimizer ? *optimizer : local_adam;

  int batch = std::min<int>(tc.batch_size, static_cast<int>(parts.size()));

  auto make_batch = [&](std::vector<int>& picks) {
    std::vector<double> data(static_cast<int64_t>(batch) * t_frames * channels);
    for (int b = 0; b < batch; ++b) {
      int idx = picks.empty() ? 0 : picks[b];
      auto pv = parts[idx].data();
      std::copy(pv.begin(), pv.end(),
                data.begin() + static_cast<int64_t>(b) * t_frames * channels);
    }
    return Tensor({batch, t_frames, channels}, std::move(data));
  };

  std::vector<TrainLogEntry> log;
  for (int step = 0; step < tc.steps; ++step) {
    std::vector<int> picks(batch);
    for (auto& v : picks) v = rng.uniform_int(0, static_cast<int>(parts.size()) - 1);
    Tensor m = make_batch(picks);

    Tape tape;
    ParamBinding p(tape, model.params());
    Var x = tape.constant(m);
    Var latent = model.encode(p, x);

    if (!model.codebooks().initialized()) {
      model.codebooks().init_from_latents(latent.value(), rng);
    }
    RqResult rq = rq_forward(latent.value(), model.codebooks(), RqMode::train,
                             cfg.quantizer_dropout, &rng);

    // Straight-through: decoder sees the quantized sum, the encoder receives
    // the decoder's gradient unchanged.
    Var z_q = add(latent, tape.constant(ops::sub(rq.quantized_sum, latent.value())));
    Var m_hat = model.decode(p, z_q);

    std::vector<Var> residuals = residual_vars(tape, latent, rq.layer_z);
    Var loss = rvq_loss(tape, x, m_hat, residuals, rq.layer_z, cfg.beta);

    GradMap grads = tape.backward(loss);
    NamedGrads named;
    p.accumulate_grads(grads, named);
    adam.step(model.params(), named);

    for (int v = 0; v < rq.depth; ++v) {
      model.codebooks().ema_update(v, rq.layer_residuals[v], rq.layer_indices[v],
                                   cfg.ema_decay, cfg.dead_usage_threshold, rng);
    }

    TrainLogEntry e;
    e.step = step;
    e.loss = loss.value().scalar_value();
    e.recon = ops::l1_loss(m_hat.value(), m).scalar_value();
    e.aux = e.loss - e.recon;
    if (on_step) on_step(e);
    log.push_back(e);
  }
  return log;
}

}  // namespace mimicparts
