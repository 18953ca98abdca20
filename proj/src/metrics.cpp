#include "mimicparts/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

#include "mimicparts/io.hpp"

namespace mimicparts {

FeatureDist FeatureDist::estimate(const std::vector<Tensor>& features) {
  MP_REQUIRE(!features.empty(), "cannot fit a distribution to zero samples");
  int d = static_cast<int>(features[0].numel());
  int n = static_cast<int>(features.size());
  std::vector<double> mean(d, 0.0);
  for (const auto& f : features) {
    MP_REQUIRE(f.numel() == d, "feature dimension mismatch");
    auto fv = f.data();
    for (int j = 0; j < d; ++j) mean[j] += fv[j];
  }
  for (auto& v : mean) v /= n;

  std::vector<double> cov(static_cast<size_t>(d) * d, 0.0);
  if (n > 1) {
    for (const auto& f : features) {
      auto fv = f.data();
      for (int i = 0; i < d; ++i) {
        double ci = fv[i] - mean[i];
        for (int j = 0; j < d; ++j) {
          cov[static_cast<size_t>(i) * d + j] += ci * (fv[j] - mean[j]);
        }
      }
    }
    for (auto& v : cov) v /= (n - 1);
  }
  // Symmetrize against accumulation round-off.
  for (int i = 0; i < d; ++i) {
    for (int j = i + 1; j < d; ++j) {
      double s = 0.5 * (cov[static_cast<size_t>(i) * d + j] + cov[static_cast<size_t>(j) * d + i]);
      cov[static_cast<size_t>(i) * d + j] = s;
      cov[static_cast<size_t>(j) * d + i] = s;
    }
  }
  FeatureDist out;
  out.mean = Tensor({d}, std::move(mean));
  out.cov = Tensor({d, d}, std::move(cov));
  out.n = n;
  return out;
}

Tensor matrix_sqrt_psd(const Tensor& a) {
  MP_REQUIRE(a.rank() == 2 && a.dim(0) == a.dim(1), "matrix_sqrt_psd expects a square matrix");
  int d = a.dim(0);
  auto av = a.data();
  for (int i = 0; i < d; ++i) {
    for (int j = i + 1; j < d; ++j) {
      MP_REQUIRE(std::abs(av[static_cast<size_t>(i) * d + j] -
                          av[static_cast<size_t>(j) * d + i]) < 1e-8,
                 "matrix_sqrt_psd expects a symmetric matrix");
    }
  }
  Eigen::MatrixXd m(d, d);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) m(i, j) = av[static_cast<size_t>(i) * d + j];
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  MP_REQUIRE(eig.info() == Eigen::Success, "eigendecomposition failed");
  Eigen::VectorXd vals = eig.eigenvalues();
  double scale = std::max(1.0, std::abs(vals.maxCoeff()));
  for (int i = 0; i < d; ++i) {
    MP_REQUIRE(vals(i) >= -1e-10 * scale,
               "matrix has a materially negative eigenvalue: " + std::to_string(vals(i)));
    vals(i) = vals(i) > 0.0 ? std::sqrt(vals(i)) : 0.0;
  }
  Eigen::MatrixXd root = eig.eigenvectors() * vals.asDiagonal() *
                         eig.eigenvectors().transpose();
  std::vector<double> out(static_cast<size_t>(d) * d);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) {
      out[static_cast<size_t>(i) * d + j] = 0.5 * (root(i, j) + root(j, i));
    }
  }
  return Tensor({d, d}, std::move(out));
}

double fgd(const FeatureDist& a, const FeatureDist& b) {
  MP_REQUIRE(a.mean.numel() == b.mean.numel(), "distribution dimensions differ");
  int d = static_cast<int>(a.mean.numel());
  double mean_term = 0.0;
  for (int j = 0; j < d; ++j) {
    double diff = a.mean(j) - b.mean(j);
    mean_term += diff * diff;
  }
  Tensor s1_root = matrix_sqrt_psd(a.cov);
  Tensor inner = ops::matmul(ops::matmul(s1_root, b.cov), s1_root);
  // Symmetrize: the product is symmetric up to round-off.
  {
    auto iv = inner.data();
    std::vector<double> sym(iv.begin(), iv.end());
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < d; ++j) {
        sym[static_cast<size_t>(i) * d + j] =
            0.5 * (iv[static_cast<size_t>(i) * d + j] + iv[static_cast<size_t>(j) * d + i]);
      }
    }
    inner = Tensor({d, d}, std::move(sym));
  }
  Tensor cross_root = matrix_sqrt_psd(inner);
  double trace = 0.0;
  for (int i = 0; i < d; ++i) {
    trace += a.cov(i, i) + b.cov(i, i) - 2.0 * cross_root(i, i);
  }
  return mean_term + trace;
}

namespace {

std::vector<double> velocity_magnitude(const Tensor& values) {
  int t_frames = values.dim(0), channels = values.dim(1);
  std::vector<double> v(t_frames - 1, 0.0);
  auto xv = values.data();
  for (int t = 0; t + 1 < t_frames; ++t) {
    double ss = 0.0;
    for (int c = 0; c < channels; ++c) {
      double d = xv[static_cast<int64_t>(t + 1) * channels + c] -
                 xv[static_cast<int64_t>(t) * channels + c];
      ss += d * d;
    }
    v[t] = std::sqrt(ss);
  }
  return v;
}

}  // namespace

std::vector<double> motion_beats(const MotionClip& clip, std::optional<int> part) {
  clip.validate();
  MP_REQUIRE(clip.frames() >= 3, "clip too short for beat extraction");
  Tensor values = part.has_value() ? split_clip(clip, clip.layout)[*part] : clip.values;
  std::vector<double> v = velocity_magnitude(values);

  std::vector<double> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  double threshold = sorted[sorted.size() / 4];  // 25th percentile

  std::vector<double> beats;
  for (size_t t = 1; t + 1 < v.size(); ++t) {
    if (v[t] < v[t - 1] && v[t] <= v[t + 1] && v[t] <= threshold) {
      // The velocity sample between frames t and t+1 sits at t + 0.5.
      beats.push_back((t + 0.5) / clip.fps);
    }
  }
  return beats;
}

double bc_kernel(const std::vector<double>& audio_beats,
                 const std::vector<double>& motion_beat_times, double sigma) {
  MP_REQUIRE(sigma > 0.0, "sigma must be positive");
  MP_REQUIRE(!audio_beats.empty(), "audio beat set must be non-empty");
  if (motion_beat_times.empty()) return 0.0;
  double total = 0.0;
  for (double b : audio_beats) {
    double best = std::numeric_limits<double>::infinity();
    for (double m : motion_beat_times) {
      double d = b - m;
      best = std::min(best, d * d);
    }
    total += std::exp(-best / (2.0 * sigma * sigma));
  }
  return total / static_cast<double>(audio_beats.size());
}

double beat_consistency(const MotionClip& clip, const std::vector<double>& audio_beats,
                        double sigma, std::optional<int> part) {
  return bc_kernel(audio_beats, motion_beats(clip, part), sigma);
}

double diversity(const std::vector<Tensor>& clips, int n_pairs, uint64_t seed) {
  MP_REQUIRE(clips.size() >= 2, "diversity needs at least two clips");
  for (const auto& c : clips) {
    MP_REQUIRE(c.same_shape(clips[0]), "diversity: clips must share shape");
  }
  int n = static_cast<int>(clips.size());
  int64_t total_pairs = static_cast<int64_t>(n) * (n - 1) / 2;

  std::vector<std::pair<int, int>> pairs;
  if (n_pairs <= 0 || n_pairs >= total_pairs) {
    pairs.reserve(total_pairs);
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) pairs.emplace_back(i, j);
    }
  } else {
    // Seeded sample of distinct unordered pairs.
    std::vector<int64_t> flat(total_pairs);
    for (int64_t i = 0; i < total_pairs; ++i) flat[i] = i;
    Rng rng(derive_seed(seed, 0xd1e));
    for (int64_t i = total_pairs - 1; i > 0; --i) {
      int64_t j = static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(i + 1));
      std::swap(flat[i], flat[j]);
    }
    for (int k = 0; k < n_pairs; ++k) {
      // Invert the triangular index.
      int64_t idx = flat[k];
      int i = 0;
      int64_t skip = n - 1;
      while (idx >= skip) {
        idx -= skip;
        ++i;
        skip = n - 1 - i;
      }
      pairs.emplace_back(i, i + 1 + static_cast<int>(idx));
    }
  }

  double acc = 0.0;
  for (auto [i, j] : pairs) {
    acc += ops::l1_loss(clips[i], clips[j]).scalar_value();
  }
  return acc / static_cast<double>(pairs.size());
}

double diversity_clips(const std::vector<MotionClip>& clips, int n_pairs, uint64_t seed,
                       std::optional<int> part) {
  std::vector<Tensor> values;
  values.reserve(clips.size());
  for (const auto& c : clips) {
    values.push_back(part.has_value() ? split_clip(c, c.layout)[*part] : c.values);
  }
  return diversity(values, n_pairs, seed);
}

std::vector<Tensor> style_features(const StyleEncoder& encoder,
                                   const std::vector<MotionClip>& clips,
                                   std::optional<int> part) {
  std::vector<Tensor> out;
  out.reserve(clips.size());
  for (const auto& clip : clips) {
    StyleEmbedding e = encoder.encode(clip);
    out.push_back(part.has_value() ? e.parts[*part] : e.concat());
  }
  return out;
}

// ---------------------------------------------------------------------------
// SRA classifier
// ---------------------------------------------------------------------------

StyleClassifier::StyleClassifier(StyleEncoderConfig backbone, PartLayout layout, int n_styles,
                                 uint64_t seed)
    : backbone_(backbone, std::move(layout), derive_seed(seed, 1)), n_styles_(n_styles) {
  MP_REQUIRE(n_styles >= 2, "classifier needs at least two classes");
  Rng rng(derive_seed(seed, 2));
  nn::declare_linear(head_, "head", kNumParts * backbone.d_model, n_styles, rng);
}

Var StyleClassifier::logits_for(ParamBinding& enc_binding, ParamBinding& head_binding,
                                const std::vector<Tensor>& windows) const {
  // windows: [T, C] full-body windows, one per sample.
  std::array<std::vector<Tensor>, kNumParts> part_views;
  for (const auto& w : windows) {
    auto parts = split_channels(w, backbone_.layout());
    for (int p = 0; p < kNumParts; ++p) {
      part_views[p].push_back(parts[p].reshaped({1, parts[p].dim(0), parts[p].dim(1)}));
    }
  }
  std::vector<Var> embeddings;
  for (int p = 0; p < kNumParts; ++p) {
    Var views = enc_binding.tape().constant(ops::concat(part_views[p], 0));
    embeddings.push_back(backbone_.encode_part(enc_binding, p, views));
  }
  return nn::linear(head_binding, "head", concat(embeddings, 1));
}

std::vector<TrainLogEntry> StyleClassifier::train(const std::vector<MotionClip>& clips,
                                                  int steps, int batch_size, double lr,
                                                  uint64_t seed) {
  MP_REQUIRE(!clips.empty(), "classifier training needs clips");
  for (const auto& c : clips) {
    MP_REQUIRE(c.style_label.has_value(), "classifier training clips need style labels");
    MP_REQUIRE(*c.style_label >= 0 && *c.style_label < n_styles_,
               "style label out of range");
  }
  int window = backbone_.config().t_window;
  Rng rng(derive_seed(seed, 0xc1a));
  Adam adam_enc(lr);
  Adam adam_head(lr);
  int batch = std::min<int>(batch_size, static_cast<int>(clips.size()));

  std::vector<TrainLogEntry> log;
  for (int step = 0; step < steps; ++step) {
    std::vector<Tensor> windows;
    std::vector<int> labels;
    for (int b = 0; b < batch; ++b) {
      const MotionClip& clip = clips[rng.uniform_int(0, static_cast<int>(clips.size()) - 1)];
      int t_frames = clip.frames();
      int w = std::min(window, t_frames);
      int start = t_frames > w ? rng.uniform_int(0, t_frames - w) : 0;
      auto cv = clip.values.data();
      int channels = clip.channels();
      std::vector<double> data(static_cast<int64_t>(w) * channels);
      std::copy(cv.begin() + static_cast<int64_t>(start) * channels,
                cv.begin() + static_cast<int64_t>(start + w) * channels, data.begin());
      windows.push_back(Tensor({w, channels}, std::move(data)));
      labels.push_back(*clip.style_label);
    }

    Tape tape;
    ParamBinding enc_b(tape, backbone_.params());
    ParamBinding head_b(tape, head_);
    Var logits = logits_for(enc_b, head_b, windows);

    std::vector<double> onehot(static_cast<size_t>(batch) * n_styles_, 0.0);
    for (int b = 0; b < batch; ++b) onehot[static_cast<size_t>(b) * n_styles_ + labels[b]] = 1.0;
    Var ce = scale(neg(sum_all(mul(log_softmax_rows(logits),
                                   tape.constant(Tensor({batch, n_styles_}, onehot))))),
                   1.0 / batch);

    GradMap grads = tape.backward(ce);
    NamedGrads enc_grads, head_grads;
    enc_b.accumulate_grads(grads, enc_grads);
    head_b.accumulate_grads(grads, head_grads);
    adam_enc.step(backbone_.params(), enc_grads);
    adam_head.step(head_, head_grads);

    TrainLogEntry e;
    e.step = step;
    e.loss = ce.value().scalar_value();
    log.push_back(e);
  }
  return log;
}

int StyleClassifier::predict(const MotionClip& clip) const {
  StyleEmbedding emb;
  auto parts = split_clip(clip, backbone_.layout());
  for (int p = 0; p < kNumParts; ++p) emb.parts[p] = backbone_.embed_part(p, parts[p]);
  Tape tape(false);
  ParamBinding head_b(tape, head_, false);
  Tensor logits =
      nn::linear(head_b, "head", tape.constant(emb.concat().reshaped({1, 3 * backbone_.config().d_model})))
          .value();
  int best = 0;
  for (int s = 1; s < n_styles_; ++s) {
    if (logits(0, s) > logits(0, best)) best = s;
  }
  return best;
}

double StyleClassifier::accuracy(const std::vector<MotionClip>& clips) const {
  MP_REQUIRE(!clips.empty(), "accuracy over zero clips");
  int correct = 0;
  for (const auto& c : clips) {
    MP_REQUIRE(c.style_label.has_value(), "clips need style labels");
    correct += predict(c) == *c.style_label ? 1 : 0;
  }
  return static_cast<double>(correct) / clips.size();
}

void StyleClassifier::save(const std::filesystem::path& path) const {
  ParamStore ser = backbone_.params();
  for (const auto& e : head_.entries()) ser.declare("clshead." + e.name, e.value);
  nlohmann::json meta;
  meta["kind"] = "classifier";
  meta["n_styles"] = n_styles_;
  meta["layout"] = backbone_.layout().to_json();
  const auto& cfg = backbone_.config();
  meta["config"] = {{"d_model", cfg.d_model},         {"layers", cfg.layers},
                    {"heads", cfg.heads},             {"t_window", cfg.t_window},
                    {"temperature", cfg.temperature}, {"ffn_mult", cfg.ffn_mult},
                    {"full_body", cfg.full_body}};
  io::save_checkpoint(path, meta, ser);
}

StyleClassifier StyleClassifier::load_from(const std::filesystem::path& path) {
  io::Checkpoint ck = io::load_checkpoint(path);
  MP_REQUIRE(ck.meta.value("kind", "") == "classifier", "checkpoint is not a classifier");
  const auto& jc = ck.meta.at("config");
  StyleEncoderConfig cfg;
  cfg.d_model = jc.at("d_model");
  cfg.layers = jc.at("layers");
  cfg.heads = jc.at("heads");
  cfg.t_window = jc.at("t_window");
  cfg.temperature = jc.at("temperature");
  cfg.ffn_mult = jc.at("ffn_mult");
  cfg.full_body = jc.at("full_body");
  StyleClassifier out(cfg, PartLayout::from_json(ck.meta.at("layout")),
                      ck.meta.at("n_styles"), 0);
  for (auto& e : ck.params.entries()) {
    if (e.name.rfind("clshead.", 0) == 0) {
      out.head_.set(e.name.substr(8), e.value);
    } else {
      out.backbone_.params().set(e.name, e.value);
    }
  }
  return out;
}

double sra(const StyleClassifier& classifier, const std::vector<MotionClip>& clips,
           const std::vector<int>& intended_labels) {
  MP_REQUIRE(!clips.empty(), "sra over zero clips");
  MP_REQUIRE(clips.size() == intended_labels.size(), "clip/label count mismatch");
  int correct = 0;
  for (size_t i = 0; i < clips.size(); ++i) {
    MP_REQUIRE(intended_labels[i] >= 0 && intended_labels[i] < classifier.n_styles(),
               "intended label outside the classifier's label space");
    correct += classifier.predict(clips[i]) == intended_labels[i] ? 1 : 0;
  }
  return static_cast<double>(correct) / clips.size();
}

}  // namespace mimicparts
