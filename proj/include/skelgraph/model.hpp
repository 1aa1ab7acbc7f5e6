#pragma once

#include <array>
#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "skelgraph/data.hpp"
#include "skelgraph/diffarray.hpp"
#include "skelgraph/errors.hpp"

namespace skelgraph {

enum class VisionMode { none, last_image, sequence };

inline VisionMode vision_mode_from_string(const std::string& s) {
  if (s == "none") return VisionMode::none;
  if (s == "last") return VisionMode::last_image;
  if (s == "sequence") return VisionMode::sequence;
  throw UsageError("unknown vision mode '" + s + "' (expected none|last|sequence)");
}

inline std::string vision_mode_to_string(VisionMode m) {
  switch (m) {
    case VisionMode::none: return "none";
    case VisionMode::last_image: return "last";
    case VisionMode::sequence: return "sequence";
  }
  return "?";
}

// Channel plan of the vision extractor; the final entry is C.
inline constexpr std::size_t kVisionChannels = 21;

struct ModelConfig {
  std::size_t obs_len = 30;   // T
  std::size_t pred_len = 60;  // T~
  std::size_t joints = 21;    // J
  std::size_t features = 3;   // F
  std::size_t n_spgcnn = 1;
  std::size_t n_txcnn = 11;
  VisionMode vision_mode = VisionMode::none;
  std::size_t image_size = 128;
  bool normalize_adjacency = false;

  std::size_t vision_channels() const {
    return vision_mode == VisionMode::none ? 0 : kVisionChannels;
  }

  void validate() const {
    if (obs_len < 1) throw UsageError("ModelConfig: obs_len must be >= 1");
    if (pred_len < 1) throw UsageError("ModelConfig: pred_len must be >= 1");
    if (joints < 2) throw UsageError("ModelConfig: joints must be >= 2");
    if (features < 1) throw UsageError("ModelConfig: features must be >= 1");
    if (n_spgcnn < 1) throw UsageError("ModelConfig: n_spgcnn must be >= 1");
    if (n_txcnn < 3) throw UsageError("ModelConfig: n_txcnn must be >= 3");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"obs_len", obs_len},
                          {"pred_len", pred_len},
                          {"joints", joints},
                          {"features", features},
                          {"n_spgcnn", n_spgcnn},
                          {"n_txcnn", n_txcnn},
                          {"vision_mode", vision_mode_to_string(vision_mode)},
                          {"image_size", image_size},
                          {"normalize_adjacency", normalize_adjacency}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    j.at("obs_len").get_to(c.obs_len);
    j.at("pred_len").get_to(c.pred_len);
    j.at("joints").get_to(c.joints);
    j.at("features").get_to(c.features);
    j.at("n_spgcnn").get_to(c.n_spgcnn);
    j.at("n_txcnn").get_to(c.n_txcnn);
    c.vision_mode = vision_mode_from_string(j.at("vision_mode").get<std::string>());
    j.at("image_size").get_to(c.image_size);
    j.at("normalize_adjacency").get_to(c.normalize_adjacency);
    c.validate();
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

// ============================================================================
// Layers
// ============================================================================

namespace detail {

template <typename T>
DiffArrayPtr<T> leaf_from_double(Shape shape, const std::vector<double>& values,
                                 bool requires_grad = false) {
  std::vector<T> v(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) v[i] = static_cast<T>(values[i]);
  return from_data<T>(std::move(shape), std::move(v), requires_grad);
}

}  // namespace detail

template <typename T>
struct Conv2dLayer {
  DiffArrayPtr<T> weight;  // [Cout,Cin,k,k]
  DiffArrayPtr<T> bias;    // [Cout]
  int padding = 1;
  int stride = 1;

  void init(std::mt19937_64& rng, std::size_t out_c, std::size_t in_c, std::size_t k, int pad,
            int str) {
    const T bound = T(1) / std::sqrt(static_cast<T>(in_c * k * k));
    weight = uniform<T>(rng, Shape{out_c, in_c, k, k}, -bound, bound, true);
    bias = zeros<T>(Shape{out_c}, true);
    padding = pad;
    stride = str;
  }

  DiffArrayPtr<T> forward(Tape<T>& tape, const DiffArrayPtr<T>& x) const {
    return conv2d(tape, x, weight, bias, padding, stride);
  }

  void collect(const std::string& prefix,
               std::vector<std::pair<std::string, DiffArrayPtr<T>>>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <typename T>
struct BatchNormLayer {
  DiffArrayPtr<T> gamma;
  DiffArrayPtr<T> beta;
  RunningStats<T> stats;
  T eps = T(1e-5);

  void init(std::size_t channels) {
    gamma = full<T>(Shape{channels}, T(1), true);
    beta = zeros<T>(Shape{channels}, true);
    stats = RunningStats<T>::init(channels);
  }

  DiffArrayPtr<T> forward(Tape<T>& tape, const DiffArrayPtr<T>& x, Mode mode) {
    return batch_norm(tape, x, gamma, beta, eps, mode, stats);
  }

  void collect(const std::string& prefix,
               std::vector<std::pair<std::string, DiffArrayPtr<T>>>& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }

  void collect_buffers(const std::string& prefix,
                       std::vector<std::pair<std::string, std::vector<T>*>>& out) {
    out.emplace_back(prefix + ".running_mean", &stats.mean);
    out.emplace_back(prefix + ".running_var", &stats.var);
  }
};

template <typename T>
struct PReluLayer {
  DiffArrayPtr<T> slope;

  void init(T value = T(0.25)) { slope = from_data<T>(Shape{1}, {value}, true); }

  DiffArrayPtr<T> forward(Tape<T>& tape, const DiffArrayPtr<T>& x) const {
    return prelu(tape, x, slope);
  }

  void collect(const std::string& prefix,
               std::vector<std::pair<std::string, DiffArrayPtr<T>>>& out) const {
    out.emplace_back(prefix + ".slope", slope);
  }
};

template <typename T>
struct ConvBnPrelu {
  Conv2dLayer<T> conv;
  BatchNormLayer<T> bn;
  PReluLayer<T> prelu_act;

  void init(std::mt19937_64& rng, std::size_t out_c, std::size_t in_c, std::size_t k, int pad,
            int str) {
    conv.init(rng, out_c, in_c, k, pad, str);
    bn.init(out_c);
    prelu_act.init();
  }

  DiffArrayPtr<T> forward(Tape<T>& tape, const DiffArrayPtr<T>& x, Mode mode) {
    return prelu_act.forward(tape, bn.forward(tape, conv.forward(tape, x), mode));
  }

  void collect(const std::string& prefix,
               std::vector<std::pair<std::string, DiffArrayPtr<T>>>& out) const {
    conv.collect(prefix + ".conv", out);
    bn.collect(prefix + ".bn", out);
    prelu_act.collect(prefix + ".prelu", out);
  }

  void collect_buffers(const std::string& prefix,
                       std::vector<std::pair<std::string, std::vector<T>*>>& out) {
    bn.collect_buffers(prefix + ".bn", out);
  }
};

// One spatio-temporal graph block: adjacency-weighted aggregation per
// timestep + 1x1 feature convolution, then a temporal convolution with the
// observed steps as channels. BN + PReLU follow each step.
template <typename T>
struct SpgcnnLayer {
  Conv2dLayer<T> feature_conv;   // F -> F, 1x1
  BatchNormLayer<T> bn_spatial;  // over F
  PReluLayer<T> prelu_spatial;
  Conv2dLayer<T> temporal_conv;  // T -> T, 3x3 over the J x F grid
  BatchNormLayer<T> bn_temporal;
  PReluLayer<T> prelu_temporal;

  void init(std::mt19937_64& rng, std::size_t obs_len, std::size_t features) {
    feature_conv.init(rng, features, features, 1, 0, 1);
    bn_spatial.init(features);
    prelu_spatial.init();
    temporal_conv.init(rng, obs_len, obs_len, 3, 1, 1);
    bn_temporal.init(obs_len);
    prelu_temporal.init();
  }

  void collect(const std::string& prefix,
               std::vector<std::pair<std::string, DiffArrayPtr<T>>>& out) const {
    feature_conv.collect(prefix + ".feature_conv", out);
    bn_spatial.collect(prefix + ".bn1", out);
    prelu_spatial.collect(prefix + ".prelu1", out);
    temporal_conv.collect(prefix + ".temporal_conv", out);
    bn_temporal.collect(prefix + ".bn2", out);
    prelu_temporal.collect(prefix + ".prelu2", out);
  }

  void collect_buffers(const std::string& prefix,
                       std::vector<std::pair<std::string, std::vector<T>*>>& out) {
    bn_spatial.collect_buffers(prefix + ".bn1", out);
    bn_temporal.collect_buffers(prefix + ".bn2", out);
  }
};

// ============================================================================
// Parameter set
// ============================================================================

template <typename T>
struct ModelParams {
  Conv2dLayer<T> input_embed;  // 2 -> F

  Conv2dLayer<T> adj_conv1;  // T -> T over the J x J grid
  BatchNormLayer<T> adj_bn;
  PReluLayer<T> adj_prelu;
  Conv2dLayer<T> adj_conv2;

  std::vector<SpgcnnLayer<T>> spgcnn;
  std::vector<ConvBnPrelu<T>> vision;  // six blocks, plan 3->6->9->12->15->18->21

  std::vector<ConvBnPrelu<T>> txcnn;  // input block + middle blocks
  Conv2dLayer<T> txcnn_out;           // T~ -> T~, no activation

  void init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    input_embed.init(rng, cfg.features, 2, 3, 1, 1);
    adj_conv1.init(rng, cfg.obs_len, cfg.obs_len, 3, 1, 1);
    adj_bn.init(cfg.obs_len);
    adj_prelu.init();
    adj_conv2.init(rng, cfg.obs_len, cfg.obs_len, 3, 1, 1);
    spgcnn.resize(cfg.n_spgcnn);
    for (auto& layer : spgcnn) layer.init(rng, cfg.obs_len, cfg.features);
    vision.clear();
    if (cfg.vision_mode != VisionMode::none) {
      const std::size_t first_in = cfg.vision_mode == VisionMode::sequence ? 3 * cfg.obs_len : 3;
      const std::size_t plan[] = {first_in, 6, 9, 12, 15, 18, kVisionChannels};
      vision.resize(6);
      for (std::size_t i = 0; i < 6; ++i) {
        vision[i].init(rng, plan[i + 1], plan[i], 3, 1, i == 0 ? 1 : 2);
      }
    }
    const std::size_t fused = cfg.obs_len + cfg.vision_channels();
    txcnn.resize(cfg.n_txcnn - 1);
    txcnn[0].init(rng, cfg.pred_len, fused, 3, 1, 1);
    for (std::size_t i = 1; i + 1 < cfg.n_txcnn; ++i) {
      txcnn[i].init(rng, cfg.pred_len, cfg.pred_len, 3, 1, 1);
    }
    txcnn_out.init(rng, cfg.pred_len, cfg.pred_len, 3, 1, 1);
  }

  std::vector<std::pair<std::string, DiffArrayPtr<T>>> named_parameters() const {
    std::vector<std::pair<std::string, DiffArrayPtr<T>>> out;
    input_embed.collect("input_embed", out);
    adj_conv1.collect("adjacency.conv1", out);
    adj_bn.collect("adjacency.bn", out);
    adj_prelu.collect("adjacency.prelu", out);
    adj_conv2.collect("adjacency.conv2", out);
    for (std::size_t i = 0; i < spgcnn.size(); ++i) {
      spgcnn[i].collect("spgcnn." + std::to_string(i), out);
    }
    for (std::size_t i = 0; i < vision.size(); ++i) {
      vision[i].collect("vision." + std::to_string(i), out);
    }
    for (std::size_t i = 0; i < txcnn.size(); ++i) {
      txcnn[i].collect("txcnn." + std::to_string(i), out);
    }
    txcnn_out.collect("txcnn.out", out);
    return out;
  }

  std::vector<std::pair<std::string, std::vector<T>*>> named_buffers() {
    std::vector<std::pair<std::string, std::vector<T>*>> out;
    adj_bn.collect_buffers("adjacency.bn", out);
    for (std::size_t i = 0; i < spgcnn.size(); ++i) {
      spgcnn[i].collect_buffers("spgcnn." + std::to_string(i), out);
    }
    for (std::size_t i = 0; i < vision.size(); ++i) {
      vision[i].collect_buffers("vision." + std::to_string(i), out);
    }
    for (std::size_t i = 0; i < txcnn.size(); ++i) {
      txcnn[i].collect_buffers("txcnn." + std::to_string(i), out);
    }
    return out;
  }
};

// ============================================================================
// Prediction containers
// ============================================================================

// Raw model output lives in the "offset frame": coordinates relative to the
// torso position at the last observed frame. The absolute path re-attaches
// that offset; centered poses subtract the predicted torso row per frame.
struct PosePrediction {
  std::size_t pred_len = 0;
  std::size_t joints = 0;
  std::size_t path_joint = 0;
  std::array<double, 3> offset{};
  std::vector<double> poses;  // pred_len*J*3, offset frame
  std::vector<double> path;   // pred_len*3, absolute

  std::vector<double> centered_poses() const {
    std::vector<double> out(poses.size());
    for (std::size_t t = 0; t < pred_len; ++t) {
      const double* torso = poses.data() + (t * joints + path_joint) * 3;
      for (std::size_t j = 0; j < joints; ++j)
        for (std::size_t d = 0; d < 3; ++d)
          out[(t * joints + j) * 3 + d] = poses[(t * joints + j) * 3 + d] - torso[d];
    }
    return out;
  }

  std::vector<double> absolute_poses() const {
    std::vector<double> out(poses.size());
    for (std::size_t i = 0; i < poses.size(); ++i) out[i] = poses[i] + offset[i % 3];
    return out;
  }
};

template <typename T>
struct ForwardResult {
  DiffArrayPtr<T> prediction;  // [B,T~,J,3]
  DiffArrayPtr<T> adjacency;   // [B,T,J,J] learned
};

struct ModelOutput {
  PosePrediction prediction;
  std::vector<double> learned_adjacency;  // T*J*J
};

// ============================================================================
// The network
// ============================================================================

template <typename T>
class SkeletonGraphModel {
 public:
  SkeletonGraphModel() = default;
  SkeletonGraphModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    params_.init(cfg_, seed);
  }

  const ModelConfig& config() const { return cfg_; }
  ModelParams<T>& params() { return params_; }
  const ModelParams<T>& params() const { return params_; }

  // [B,T,J,2] -> [B,F,T,J]
  DiffArrayPtr<T> input_embedding(Tape<T>& tape, const DiffArrayPtr<T>& vertices) const {
    auto x = permute(tape, vertices, {0, 3, 1, 2});  // [B,2,T,J]
    return params_.input_embed.forward(tape, x);
  }

  // [B,T,J,J] -> [B,T,J,J]; the learned weights are unconstrained in sign and
  // symmetry.
  DiffArrayPtr<T> learn_adjacency(Tape<T>& tape, const DiffArrayPtr<T>& adjacency, Mode mode) {
    auto x = params_.adj_conv1.forward(tape, adjacency);
    x = params_.adj_bn.forward(tape, x, mode);
    x = params_.adj_prelu.forward(tape, x);
    return params_.adj_conv2.forward(tape, x);
  }

  // x: [B,F,T,J], adjacency: [B,T,J,J] -> [B,F,T,J]
  DiffArrayPtr<T> spgcnn_layer(Tape<T>& tape, const DiffArrayPtr<T>& x,
                               const DiffArrayPtr<T>& adjacency, std::size_t layer_idx,
                               Mode mode) {
    try {
      validate_finite(*adjacency, "adjacency");
    } catch (const NumericError&) {
      throw NumericError("spgcnn_layer " + std::to_string(layer_idx) +
                         ": non-finite adjacency input");
    }
    auto& layer = params_.spgcnn.at(layer_idx);
    const std::size_t B = x->shape[0], F = x->shape[1], Tn = x->shape[2], J = x->shape[3];
    // spatial: X'_t = A_t . X_t, then a 1x1 feature convolution
    auto xt = reshape(tape, permute(tape, x, {0, 2, 3, 1}), Shape{B * Tn, J, F});
    auto at = reshape(tape, adjacency, Shape{B * Tn, J, J});
    auto agg = reshape(tape, bmm(tape, at, xt), Shape{B, Tn, J, F});
    auto spatial = permute(tape, agg, {0, 3, 1, 2});  // [B,F,T,J]
    spatial = layer.feature_conv.forward(tape, spatial);
    spatial = layer.bn_spatial.forward(tape, spatial, mode);
    spatial = layer.prelu_spatial.forward(tape, spatial);
    // temporal: T as the channel axis over the J x F grid
    auto temporal = permute(tape, spatial, {0, 2, 3, 1});  // [B,T,J,F]
    temporal = layer.temporal_conv.forward(tape, temporal);
    temporal = layer.bn_temporal.forward(tape, temporal, mode);
    temporal = layer.prelu_temporal.forward(tape, temporal);
    auto out = permute(tape, temporal, {0, 3, 1, 2});  // [B,F,T,J]
    if (layer_idx > 0) out = add(tape, out, x);  // residual when going deeper
    return out;
  }

  // images: [B,3,H,W] (last) or [B,3T,H,W] (sequence) -> [B,C,J,F]
  DiffArrayPtr<T> extract_vision(Tape<T>& tape, const DiffArrayPtr<T>& images, Mode mode) {
    if (cfg_.vision_mode == VisionMode::none) {
      throw UsageError("extract_vision: vision_mode is none");
    }
    if (images->rank() != 4) throw ShapeError("extract_vision: images must be [B,C,H,W]");
    if (images->shape[2] < 64 || images->shape[3] < 64) {
      throw ShapeError("extract_vision: image smaller than 64x64");
    }
    auto x = images;
    for (auto& block : params_.vision) x = block.forward(tape, x, mode);
    return adaptive_avg_pool(tape, x, cfg_.joints, cfg_.features);
  }

  // Channel-axis concatenation; with no vision features the graph embedding
  // passes through unchanged.
  static DiffArrayPtr<T> fuse(Tape<T>& tape, const DiffArrayPtr<T>& graph_emb,
                              const DiffArrayPtr<T>& vision_feat) {
    if (!vision_feat) return graph_emb;
    if (graph_emb->rank() != 4 || vision_feat->rank() != 4 ||
        graph_emb->shape[2] != vision_feat->shape[2] ||
        graph_emb->shape[3] != vision_feat->shape[3]) {
      throw ShapeError("fuse: spatial dims disagree");
    }
    return concat(tape, {graph_emb, vision_feat}, 1);
  }

  // fused: [B,T+C,J,F] -> [B,T~,J,F]; middle blocks carry residual skips and
  // the output layer has no activation.
  DiffArrayPtr<T> txcnn_stack(Tape<T>& tape, const DiffArrayPtr<T>& fused, Mode mode) {
    auto x = params_.txcnn[0].forward(tape, fused, mode);
    for (std::size_t i = 1; i < params_.txcnn.size(); ++i) {
      x = add(tape, params_.txcnn[i].forward(tape, x, mode), x);
    }
    return params_.txcnn_out.forward(tape, x);
  }

  // Applies the configured adjacency preprocessing to a raw binary adjacency.
  std::vector<double> prepare_adjacency(const std::vector<double>& adjacency,
                                        std::size_t timesteps) const {
    if (!cfg_.normalize_adjacency) return adjacency;
    return normalize_adjacency_symmetric(adjacency, cfg_.joints, timesteps);
  }

  // vertices: B*T*J*2, adjacency: B*T*J*J (already prepared), images laid out
  // one per sample (last) or obs_len per sample (sequence).
  ForwardResult<T> forward_batch(Tape<T>& tape, const std::vector<double>& vertices,
                                 const std::vector<double>& adjacency, std::size_t batch,
                                 const std::vector<Image>* images, Mode mode) {
    const std::size_t Tn = cfg_.obs_len, J = cfg_.joints;
    if (cfg_.features != 3) {
      throw UsageError("forward: pipeline output requires features == 3");
    }
    if (vertices.size() != batch * Tn * J * 2) {
      throw ShapeError("forward: vertex buffer does not match config " + shape_str({batch, Tn, J, 2}));
    }
    if (adjacency.size() != batch * Tn * J * J) {
      throw ShapeError("forward: adjacency buffer does not match config");
    }
    const bool wants_images = cfg_.vision_mode != VisionMode::none;
    if (wants_images && images == nullptr) {
      throw UsageError("forward: vision mode requires images");
    }

    auto v_leaf = detail::leaf_from_double<T>(Shape{batch, Tn, J, 2}, vertices);
    auto a_leaf = detail::leaf_from_double<T>(Shape{batch, Tn, J, J}, adjacency);

    ForwardResult<T> result;
    auto stage = [](const char* name, auto&& fn) {
      try {
        return fn();
      } catch (const NumericError& e) {
        throw NumericError(std::string("forward[") + name + "]: " + e.what());
      }
    };

    auto emb = stage("input_embedding", [&] { return input_embedding(tape, v_leaf); });
    result.adjacency =
        stage("learn_adjacency", [&] { return learn_adjacency(tape, a_leaf, mode); });
    auto x = emb;
    for (std::size_t i = 0; i < cfg_.n_spgcnn; ++i) {
      x = stage("spgcnn", [&] { return spgcnn_layer(tape, x, result.adjacency, i, mode); });
    }
    auto graph_emb = permute(tape, x, {0, 2, 3, 1});  // [B,T,J,F]

    DiffArrayPtr<T> vision_feat;
    if (wants_images) {
      auto img_tensor = stage("vision_input", [&] { return build_image_tensor(batch, *images); });
      vision_feat = stage("extract_vision", [&] { return extract_vision(tape, img_tensor, mode); });
    }
    auto fused = stage("fuse", [&] { return fuse(tape, graph_emb, vision_feat); });
    result.prediction = stage("txcnn", [&] { return txcnn_stack(tape, fused, mode); });
    return result;
  }

  // Single-sample eval-mode forward; deterministic given params and inputs.
  ModelOutput forward(const SpatioTemporalGraph& graph, const std::vector<Image>* images,
                      const std::array<double, 3>& offset, std::size_t path_joint) {
    if (graph.timesteps != cfg_.obs_len || graph.joints != cfg_.joints) {
      throw ShapeError("forward: graph " + shape_str({graph.timesteps, graph.joints}) +
                       " does not match config [" + std::to_string(cfg_.obs_len) + "," +
                       std::to_string(cfg_.joints) + "]");
    }
    Tape<T> tape;
    const auto prepared = prepare_adjacency(graph.adjacency, graph.timesteps);
    const std::vector<Image>* imgs = cfg_.vision_mode == VisionMode::none ? nullptr : images;
    auto fwd = forward_batch(tape, graph.vertices, prepared, 1, imgs, Mode::eval);
    ModelOutput out;
    out.prediction.pred_len = cfg_.pred_len;
    out.prediction.joints = cfg_.joints;
    out.prediction.path_joint = path_joint;
    out.prediction.offset = offset;
    out.prediction.poses.assign(fwd.prediction->data.begin(), fwd.prediction->data.end());
    out.prediction.path.resize(cfg_.pred_len * 3);
    for (std::size_t t = 0; t < cfg_.pred_len; ++t)
      for (std::size_t d = 0; d < 3; ++d)
        out.prediction.path[t * 3 + d] =
            out.prediction.poses[(t * cfg_.joints + path_joint) * 3 + d] + offset[d];
    out.learned_adjacency.assign(fwd.adjacency->data.begin(), fwd.adjacency->data.end());
    return out;
  }

  // Deterministic preset that reduces the whole network to a linear map:
  // identity/delta kernels, PReLU slope 1 and eval-mode BN with mean 0 and
  // var 1-eps. Requires pred_len == obs_len and no vision.
  void apply_identity_preset() {
    if (cfg_.pred_len != cfg_.obs_len || cfg_.vision_mode != VisionMode::none) {
      throw UsageError("identity preset requires pred_len == obs_len and no vision");
    }
    auto delta = [](Conv2dLayer<T>& layer) {
      std::fill(layer.weight->data.begin(), layer.weight->data.end(), T(0));
      std::fill(layer.bias->data.begin(), layer.bias->data.end(), T(0));
      const std::size_t out_c = layer.weight->shape[0], in_c = layer.weight->shape[1];
      const std::size_t k = layer.weight->shape[2], center = (k / 2) * k + k / 2;
      for (std::size_t c = 0; c < std::min(out_c, in_c); ++c) {
        layer.weight->data[(c * in_c + c) * k * k + center] = T(1);
      }
    };
    auto zero_conv = [](Conv2dLayer<T>& layer) {
      std::fill(layer.weight->data.begin(), layer.weight->data.end(), T(0));
      std::fill(layer.bias->data.begin(), layer.bias->data.end(), T(0));
    };
    auto identity_bn = [](BatchNormLayer<T>& bn) {
      std::fill(bn.gamma->data.begin(), bn.gamma->data.end(), T(1));
      std::fill(bn.beta->data.begin(), bn.beta->data.end(), T(0));
      std::fill(bn.stats.mean.begin(), bn.stats.mean.end(), T(0));
      std::fill(bn.stats.var.begin(), bn.stats.var.end(), T(1) - bn.eps);
    };
    auto identity_prelu = [](PReluLayer<T>& p) { p.slope->data[0] = T(1); };

    delta(params_.input_embed);
    delta(params_.adj_conv1);
    identity_bn(params_.adj_bn);
    identity_prelu(params_.adj_prelu);
    delta(params_.adj_conv2);
    for (auto& layer : params_.spgcnn) {
      delta(layer.feature_conv);
      identity_bn(layer.bn_spatial);
      identity_prelu(layer.prelu_spatial);
      delta(layer.temporal_conv);
      identity_bn(layer.bn_temporal);
      identity_prelu(layer.prelu_temporal);
    }
    delta(params_.txcnn[0].conv);
    identity_bn(params_.txcnn[0].bn);
    identity_prelu(params_.txcnn[0].prelu_act);
    for (std::size_t i = 1; i < params_.txcnn.size(); ++i) {
      zero_conv(params_.txcnn[i].conv);
      identity_bn(params_.txcnn[i].bn);
      identity_prelu(params_.txcnn[i].prelu_act);
    }
    delta(params_.txcnn_out);
  }

 private:
  // Resizes and stacks the per-sample images into the conv input layout.
  DiffArrayPtr<T> build_image_tensor(std::size_t batch, const std::vector<Image>& images) const {
    const std::size_t per_sample = cfg_.vision_mode == VisionMode::sequence ? cfg_.obs_len : 1;
    if (images.size() != batch * per_sample) {
      throw ShapeError("forward: expected " + std::to_string(batch * per_sample) + " images, got " +
                       std::to_string(images.size()));
    }
    const std::size_t S = cfg_.image_size;
    const std::size_t channels = 3 * per_sample;
    std::vector<T> buf(batch * channels * S * S);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t f = 0; f < per_sample; ++f) {
        const Image resized = resize_bilinear(images[b * per_sample + f], S, S);
        for (std::size_t c = 0; c < 3; ++c) {
          const double* src = resized.rgb.data() + c * S * S;
          T* dst = buf.data() + ((b * channels) + f * 3 + c) * S * S;
          for (std::size_t i = 0; i < S * S; ++i) dst[i] = static_cast<T>(src[i]);
        }
      }
    }
    return from_data<T>(Shape{batch, channels, S, S}, std::move(buf));
  }

  ModelConfig cfg_;
  ModelParams<T> params_;
};

}  // namespace skelgraph
