#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "skelgraph/data.hpp"
#include "skelgraph/losses.hpp"
#include "skelgraph/metrics.hpp"
#include "skelgraph/model.hpp"

namespace skelgraph {

struct TrainConfig {
  double lr0 = 0.01;
  double decay_factor = 0.2;
  std::size_t decay_every = 200;
  std::size_t epochs = 450;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  double momentum = 0.0;   // 0 = plain SGD
  double clip_norm = 0.0;  // 0 = no gradient clipping
  LossWeights loss_weights;
  ModelConfig model;
  std::string precision = "f32";  // f32 | f64
  bool cos_pairs_bones = false;   // SCL cosine pairs from bone topology
  std::size_t checkpoint_every = 0;  // epochs between checkpoints; 0 = final only
  std::size_t eval_every = 0;        // epochs between history eval records; 0 = never
  std::string checkpoint_dir;
  std::string data_dir;

  void validate() const {
    if (lr0 <= 0) throw UsageError("TrainConfig: lr0 must be positive");
    if (decay_factor <= 0 || decay_factor > 1) throw UsageError("TrainConfig: decay_factor in (0,1]");
    if (decay_every < 1) throw UsageError("TrainConfig: decay_every must be >= 1");
    if (batch_size < 1) throw UsageError("TrainConfig: batch_size must be >= 1");
    if (precision != "f32" && precision != "f64") throw UsageError("TrainConfig: precision f32|f64");
    model.validate();
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"lr0", lr0},
                          {"decay_factor", decay_factor},
                          {"decay_every", decay_every},
                          {"epochs", epochs},
                          {"batch_size", batch_size},
                          {"seed", seed},
                          {"momentum", momentum},
                          {"clip_norm", clip_norm},
                          {"lambda1", loss_weights.lambda1},
                          {"lambda2", loss_weights.lambda2},
                          {"model", model.to_json()},
                          {"precision", precision},
                          {"cos_pairs_bones", cos_pairs_bones},
                          {"checkpoint_every", checkpoint_every},
                          {"eval_every", eval_every}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    j.at("lr0").get_to(c.lr0);
    j.at("decay_factor").get_to(c.decay_factor);
    j.at("decay_every").get_to(c.decay_every);
    j.at("epochs").get_to(c.epochs);
    j.at("batch_size").get_to(c.batch_size);
    j.at("seed").get_to(c.seed);
    j.at("momentum").get_to(c.momentum);
    j.at("clip_norm").get_to(c.clip_norm);
    j.at("lambda1").get_to(c.loss_weights.lambda1);
    j.at("lambda2").get_to(c.loss_weights.lambda2);
    c.model = ModelConfig::from_json(j.at("model"));
    j.at("precision").get_to(c.precision);
    j.at("cos_pairs_bones").get_to(c.cos_pairs_bones);
    j.at("checkpoint_every").get_to(c.checkpoint_every);
    j.at("eval_every").get_to(c.eval_every);
    c.validate();
    return c;
  }
};

// Step decay: lr0 * factor^floor(epoch / every).
inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  return cfg.lr0 * std::pow(cfg.decay_factor, static_cast<double>(epoch / cfg.decay_every));
}

// ============================================================================
// Checkpoint container (versioned binary, little-endian arrays keyed by name)
// ============================================================================

struct CheckpointArray {
  std::string name;
  std::uint8_t dtype = 8;  // bytes per scalar: 4 or 8
  Shape shape;
  std::vector<unsigned char> raw;
};

struct CheckpointData {
  std::uint32_t version = 1;
  nlohmann::json meta;
  std::vector<CheckpointArray> arrays;

  const CheckpointArray* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }
};

void save_checkpoint(const CheckpointData& ckpt, const std::string& path);
CheckpointData load_checkpoint(const std::string& path);

namespace detail {

template <typename T>
CheckpointArray pack_array(const std::string& name, const Shape& shape, const std::vector<T>& v) {
  CheckpointArray a;
  a.name = name;
  a.dtype = sizeof(T);
  a.shape = shape;
  a.raw.resize(v.size() * sizeof(T));
  std::memcpy(a.raw.data(), v.data(), a.raw.size());
  return a;
}

template <typename T>
void unpack_array(const CheckpointArray& a, const Shape& expect_shape, std::vector<T>& out) {
  if (a.dtype != sizeof(T)) {
    throw FormatError("checkpoint array '" + a.name + "' stored with different precision");
  }
  if (a.shape != expect_shape) {
    throw FormatError("checkpoint array '" + a.name + "' shape mismatch: stored " +
                      shape_str(a.shape) + ", model expects " + shape_str(expect_shape));
  }
  out.resize(shape_numel(a.shape));
  std::memcpy(out.data(), a.raw.data(), a.raw.size());
}

}  // namespace detail

template <typename T>
CheckpointData make_checkpoint(const SkeletonGraphModel<T>& model, const TrainConfig& cfg,
                               std::size_t epoch) {
  CheckpointData ckpt;
  ckpt.meta = nlohmann::json{
      {"format", "skelgraph-checkpoint"},
      {"epoch", epoch},
      {"precision", sizeof(T) == 4 ? "f32" : "f64"},
      {"train_config", cfg.to_json()},
      {"model_config", model.config().to_json()},
      {"normalization", {{"obs_2d", "per_window_minmax"}, {"target_frame", "offset_centered"}, {"target_scale", 1.0}}},
  };
  for (const auto& [name, p] : model.params().named_parameters()) {
    ckpt.arrays.push_back(detail::pack_array<T>(name, p->shape, p->data));
  }
  auto& params = const_cast<SkeletonGraphModel<T>&>(model).params();
  for (auto& [name, buf] : params.named_buffers()) {
    ckpt.arrays.push_back(detail::pack_array<T>(name, Shape{buf->size()}, *buf));
  }
  return ckpt;
}

// Rebuilds a model from a checkpoint; every stored array must match the
// reconstructed parameter set exactly.
template <typename T>
SkeletonGraphModel<T> model_from_checkpoint(const CheckpointData& ckpt) {
  const std::string precision = ckpt.meta.at("precision").get<std::string>();
  if ((precision == "f32") != (sizeof(T) == 4)) {
    throw FormatError("checkpoint precision is " + precision);
  }
  const ModelConfig cfg = ModelConfig::from_json(ckpt.meta.at("model_config"));
  SkeletonGraphModel<T> model(cfg, 0);
  std::size_t used = 0;
  for (const auto& [name, p] : model.params().named_parameters()) {
    const CheckpointArray* a = ckpt.find(name);
    if (!a) throw FormatError("checkpoint missing parameter '" + name + "'");
    detail::unpack_array<T>(*a, p->shape, p->data);
    ++used;
  }
  for (auto& [name, buf] : model.params().named_buffers()) {
    const CheckpointArray* a = ckpt.find(name);
    if (!a) throw FormatError("checkpoint missing buffer '" + name + "'");
    detail::unpack_array<T>(*a, Shape{buf->size()}, *buf);
    ++used;
  }
  if (used != ckpt.arrays.size()) {
    throw FormatError("checkpoint carries arrays unknown to this model configuration");
  }
  return model;
}

// ============================================================================
// Batching helpers
// ============================================================================

class ImageCache {
 public:
  const Image& get(const std::string& path) {
    auto it = cache_.find(path);
    if (it != cache_.end()) return it->second;
    if (path.empty()) throw FormatError("sample frame has no image reference");
    return cache_.emplace(path, load_ppm(path)).first->second;
  }

 private:
  std::unordered_map<std::string, Image> cache_;
};

// Images for one sample in forward layout: one per sample for last-image
// mode, obs_len per sample for sequence mode.
inline void append_sample_images(const Sample& s, VisionMode mode, ImageCache& cache,
                                 std::vector<Image>& out) {
  if (mode == VisionMode::none) return;
  if (s.images.empty()) throw FormatError("vision mode requires observed images");
  if (mode == VisionMode::last_image) {
    out.push_back(cache.get(s.images.back()));
  } else {
    for (const auto& ref : s.images) out.push_back(cache.get(ref));
  }
}

namespace detail {

inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t sample_hash(const Sample& s) {
  std::uint64_t h = 1469598103934665603ULL;
  h = fnv1a(s.obs_graph.vertices.data(), s.obs_graph.vertices.size() * sizeof(double), h);
  h = fnv1a(s.target.data(), s.target.size() * sizeof(double), h);
  h = fnv1a(s.target_path.data(), s.target_path.size() * sizeof(double), h);
  h = fnv1a(s.offset.data(), sizeof(s.offset), h);
  return h;
}

// Canonical sample order: content hash with a full lexicographic tie-break.
// Training therefore does not depend on how the caller stored the samples.
inline std::vector<std::size_t> canonical_order(const std::vector<Sample>& samples) {
  std::vector<std::uint64_t> hashes(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) hashes[i] = sample_hash(samples[i]);
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (hashes[a] != hashes[b]) return hashes[a] < hashes[b];
    if (samples[a].obs_graph.vertices != samples[b].obs_graph.vertices)
      return samples[a].obs_graph.vertices < samples[b].obs_graph.vertices;
    return samples[a].target < samples[b].target;
  });
  return order;
}

}  // namespace detail

// ============================================================================
// Evaluation
// ============================================================================

// Eval-mode per-sample reports averaged element-wise. Pose errors compare
// per-frame centered poses; path errors compare re-attached absolute
// trajectories.
template <typename T>
MetricsReport evaluate(SkeletonGraphModel<T>& model, const std::vector<Sample>& samples,
                       double fps) {
  if (samples.empty()) throw UsageError("evaluate: no samples");
  ImageCache cache;
  std::vector<MetricsReport> reports;
  reports.reserve(samples.size());
  for (const Sample& s : samples) {
    std::vector<Image> images;
    append_sample_images(s, model.config().vision_mode, cache, images);
    auto out = model.forward(s.obs_graph, images.empty() ? nullptr : &images, s.offset,
                             s.path_joint);
    auto pose = mpjpe_curve(s.target, out.prediction.centered_poses(), s.pred_len,
                            s.obs_graph.joints);
    auto path = trajectory_curve(s.target_path, out.prediction.path, s.pred_len);
    reports.push_back(assemble_report(std::move(pose), std::move(path), fps));
  }
  return aggregate_reports(reports);
}

// ============================================================================
// Training
// ============================================================================

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0;
  double loss = 0;
  std::optional<MetricsReport> eval;

  nlohmann::json to_json() const {
    nlohmann::json j{{"epoch", epoch}, {"lr", lr}, {"loss", loss}};
    if (eval) j["eval"] = eval->to_json();
    return j;
  }
};

using TrainHistory = std::vector<EpochRecord>;

// Seeded-shuffle mini-batch SGD with the step-decay schedule. Checkpoints go
// to cfg.checkpoint_dir when set (epoch_NNNNN plus `final`); a non-finite
// loss aborts without touching the last checkpoint written.
template <typename T>
TrainHistory train(SkeletonGraphModel<T>& model, const TrainConfig& cfg,
                   const std::vector<Sample>& samples,
                   const std::vector<Sample>* eval_samples = nullptr) {
  cfg.validate();
  if (samples.empty()) throw UsageError("train: no samples");
  const ModelConfig& mc = model.config();
  const std::size_t J = mc.joints, Tn = mc.obs_len, Tp = mc.pred_len;
  for (const Sample& s : samples) {
    if (s.obs_graph.joints != J || s.obs_graph.timesteps != Tn || s.pred_len != Tp) {
      throw UsageError("train: sample window does not match the model configuration");
    }
  }

  auto params = model.params().named_parameters();
  std::vector<std::vector<T>> velocity;
  if (cfg.momentum > 0) {
    for (const auto& [name, p] : params) velocity.emplace_back(p->numel(), T(0));
  }

  // model-frame targets and prepared adjacencies are fixed per sample
  std::vector<std::vector<double>> targets(samples.size());
  std::vector<std::vector<double>> adjacencies(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    targets[i] = samples[i].model_target();
    adjacencies[i] = model.prepare_adjacency(samples[i].obs_graph.adjacency, Tn);
  }
  std::vector<std::pair<std::size_t, std::size_t>> bone_pairs;
  if (cfg.cos_pairs_bones) {
    for (const auto& [a, b] : samples.front().obs_graph.topology) {
      bone_pairs.emplace_back(static_cast<std::size_t>(a), static_cast<std::size_t>(b));
    }
  }

  ImageCache cache;
  auto order = detail::canonical_order(samples);
  std::mt19937_64 shuffle_rng(cfg.seed);
  TrainHistory history;
  history.reserve(cfg.epochs);

  const auto write_ckpt = [&](const std::string& name, std::size_t epoch) {
    if (cfg.checkpoint_dir.empty()) return;
    save_checkpoint(make_checkpoint(model, cfg, epoch),
                    (std::filesystem::path(cfg.checkpoint_dir) / name).string());
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t bsz = std::min(cfg.batch_size, order.size() - start);
      std::vector<double> verts(bsz * Tn * J * 2);
      std::vector<double> adj(bsz * Tn * J * J);
      std::vector<double> target(bsz * Tp * J * 3);
      std::vector<Image> images;
      for (std::size_t b = 0; b < bsz; ++b) {
        const Sample& s = samples[order[start + b]];
        std::copy(s.obs_graph.vertices.begin(), s.obs_graph.vertices.end(),
                  verts.begin() + b * Tn * J * 2);
        const auto& a = adjacencies[order[start + b]];
        std::copy(a.begin(), a.end(), adj.begin() + b * Tn * J * J);
        const auto& tgt = targets[order[start + b]];
        std::copy(tgt.begin(), tgt.end(), target.begin() + b * Tp * J * 3);
        append_sample_images(s, mc.vision_mode, cache, images);
      }

      Tape<T> tape;
      auto fwd = model.forward_batch(tape, verts, adj, bsz, images.empty() ? nullptr : &images,
                                     Mode::train);
      auto truth = detail::leaf_from_double<T>(Shape{bsz * Tp, J, 3}, target);
      auto pred = reshape(tape, fwd.prediction, Shape{bsz * Tp, J, 3});
      DiffArrayPtr<T> loss;
      try {
        loss = total_loss(tape, truth, pred, cfg.loss_weights,
                          cfg.cos_pairs_bones ? &bone_pairs : nullptr);
      } catch (const NumericError& e) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(start / cfg.batch_size) + ": " + e.what());
      }
      if (!std::isfinite(static_cast<double>(loss->data[0]))) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(start / cfg.batch_size));
      }
      zero_grads(params);
      tape.backward(loss);

      if (cfg.clip_norm > 0) {
        double norm_sq = 0;
        for (const auto& [name, p] : params) {
          for (T g : p->grad_or_zeros()) norm_sq += static_cast<double>(g) * static_cast<double>(g);
        }
        const double norm = std::sqrt(norm_sq);
        if (norm > cfg.clip_norm) {
          const T s = static_cast<T>(cfg.clip_norm / norm);
          for (const auto& [name, p] : params) {
            for (T& g : p->ensure_grad()) g *= s;
          }
        }
      }

      if (cfg.momentum > 0) {
        const T mu = static_cast<T>(cfg.momentum);
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
          auto& p = params[pi].second;
          auto& g = p->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) {
            velocity[pi][i] = mu * velocity[pi][i] + g[i];
            g[i] = velocity[pi][i];
          }
        }
      }
      sgd_step(params, static_cast<T>(lr));
      epoch_loss += static_cast<double>(loss->data[0]) * static_cast<double>(bsz);
      tape.clear();
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.loss = epoch_loss / static_cast<double>(order.size());
    if (eval_samples && cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) {
      rec.eval = evaluate(model, *eval_samples, eval_samples->front().fps);
    }
    history.push_back(std::move(rec));
    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%05zu", epoch + 1);
      write_ckpt(name, epoch + 1);
    }
  }
  write_ckpt("final", cfg.epochs);
  return history;
}

}  // namespace skelgraph
