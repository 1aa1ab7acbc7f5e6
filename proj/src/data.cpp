#include "skelgraph/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "skelgraph/errors.hpp"

namespace fs = std::filesystem;

namespace skelgraph {

std::vector<double> Sample::model_target() const {
  const std::size_t joints = obs_graph.joints;
  std::vector<double> out(target.size());
  for (std::size_t t = 0; t < pred_len; ++t) {
    for (std::size_t j = 0; j < joints; ++j) {
      for (std::size_t d = 0; d < 3; ++d) {
        out[(t * joints + j) * 3 + d] =
            target[(t * joints + j) * 3 + d] + target_path[t * 3 + d] - offset[d];
      }
    }
  }
  return out;
}

std::vector<double> build_adjacency(const std::vector<std::pair<int, int>>& bones,
                                    std::size_t joints, std::size_t timesteps) {
  std::vector<double> base(joints * joints, 0.0);
  for (std::size_t j = 0; j < joints; ++j) base[j * joints + j] = 1.0;
  for (const auto& [a, b] : bones) {
    if (a < 0 || b < 0 || static_cast<std::size_t>(a) >= joints ||
        static_cast<std::size_t>(b) >= joints) {
      throw FormatError("build_adjacency: bone index (" + std::to_string(a) + "," +
                        std::to_string(b) + ") out of range for " + std::to_string(joints) +
                        " joints");
    }
    base[static_cast<std::size_t>(a) * joints + static_cast<std::size_t>(b)] = 1.0;
    base[static_cast<std::size_t>(b) * joints + static_cast<std::size_t>(a)] = 1.0;
  }
  std::vector<double> out(timesteps * joints * joints);
  for (std::size_t t = 0; t < timesteps; ++t) {
    std::copy(base.begin(), base.end(), out.begin() + t * joints * joints);
  }
  return out;
}

std::vector<double> normalize_adjacency_symmetric(const std::vector<double>& adjacency,
                                                  std::size_t joints, std::size_t timesteps) {
  std::vector<double> out(adjacency.size());
  for (std::size_t t = 0; t < timesteps; ++t) {
    const double* a = adjacency.data() + t * joints * joints;
    double* o = out.data() + t * joints * joints;
    std::vector<double> dinv(joints, 0.0);
    for (std::size_t i = 0; i < joints; ++i) {
      double deg = 0;
      for (std::size_t j = 0; j < joints; ++j) deg += a[i * joints + j];
      dinv[i] = deg > 0 ? 1.0 / std::sqrt(deg) : 0.0;
    }
    for (std::size_t i = 0; i < joints; ++i)
      for (std::size_t j = 0; j < joints; ++j) o[i * joints + j] = dinv[i] * a[i * joints + j] * dinv[j];
  }
  return out;
}

std::pair<std::vector<double>, std::vector<double>> center_on_torso(
    const std::vector<double>& frames, std::size_t length, std::size_t joints,
    std::size_t path_joint) {
  if (path_joint >= joints) throw UsageError("center_on_torso: path joint out of range");
  if (frames.size() != length * joints * 3) throw UsageError("center_on_torso: bad buffer size");
  std::vector<double> centered(frames.size());
  std::vector<double> path(length * 3);
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t d = 0; d < 3; ++d) path[t * 3 + d] = frames[(t * joints + path_joint) * 3 + d];
    for (std::size_t j = 0; j < joints; ++j)
      for (std::size_t d = 0; d < 3; ++d)
        centered[(t * joints + j) * 3 + d] = frames[(t * joints + j) * 3 + d] - path[t * 3 + d];
  }
  return {std::move(centered), std::move(path)};
}

std::vector<double> attach_path(const std::vector<double>& centered,
                                const std::vector<double>& path, std::size_t length,
                                std::size_t joints) {
  if (centered.size() != length * joints * 3 || path.size() != length * 3) {
    throw UsageError("attach_path: bad buffer size");
  }
  std::vector<double> frames(centered.size());
  for (std::size_t t = 0; t < length; ++t)
    for (std::size_t j = 0; j < joints; ++j)
      for (std::size_t d = 0; d < 3; ++d)
        frames[(t * joints + j) * 3 + d] = centered[(t * joints + j) * 3 + d] + path[t * 3 + d];
  return frames;
}

std::vector<double> normalize_window(const std::vector<double>& p2d, std::size_t timesteps,
                                     std::size_t joints) {
  if (p2d.size() != timesteps * joints * 2) throw UsageError("normalize_window: bad buffer size");
  std::vector<double> out(p2d.size());
  for (std::size_t axis = 0; axis < 2; ++axis) {
    double lo = p2d[axis], hi = p2d[axis];
    for (std::size_t i = 0; i < timesteps * joints; ++i) {
      lo = std::min(lo, p2d[i * 2 + axis]);
      hi = std::max(hi, p2d[i * 2 + axis]);
    }
    const double range = hi - lo;
    for (std::size_t i = 0; i < timesteps * joints; ++i) {
      out[i * 2 + axis] = range > 1e-12 ? 2.0 * (p2d[i * 2 + axis] - lo) / range - 1.0 : 0.0;
    }
  }
  return out;
}

std::vector<Sample> window_samples(const SkeletonSequence& seq, std::size_t obs_len,
                                   std::size_t pred_len, std::size_t stride) {
  if (stride < 1) throw UsageError("window_samples: stride must be >= 1");
  if (obs_len < 1 || pred_len < 1) throw UsageError("window_samples: window lengths must be >= 1");
  std::vector<Sample> samples;
  const std::size_t total = obs_len + pred_len;
  const std::size_t J = seq.joints;
  if (seq.frames.size() < total) return samples;
  const std::size_t count = (seq.frames.size() - total) / stride + 1;
  const auto adjacency = build_adjacency(seq.bones, J, obs_len);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t start = k * stride;
    Sample s;
    s.pred_len = pred_len;
    s.path_joint = seq.path_joint;
    s.fps = seq.fps;

    std::vector<double> obs2d(obs_len * J * 2);
    s.images.resize(obs_len);
    for (std::size_t t = 0; t < obs_len; ++t) {
      const Frame& f = seq.frames[start + t];
      std::copy(f.p2d.begin(), f.p2d.end(), obs2d.begin() + t * J * 2);
      s.images[t] = f.image.empty() ? std::string() : resolve_image_ref(seq, f.image);
    }
    s.obs_graph.timesteps = obs_len;
    s.obs_graph.joints = J;
    s.obs_graph.vertices = normalize_window(obs2d, obs_len, J);
    s.obs_graph.adjacency = adjacency;
    s.obs_graph.topology = seq.bones;

    std::vector<double> future(pred_len * J * 3);
    for (std::size_t t = 0; t < pred_len; ++t) {
      const Frame& f = seq.frames[start + obs_len + t];
      std::copy(f.p3d.begin(), f.p3d.end(), future.begin() + t * J * 3);
    }
    auto [centered, path] = center_on_torso(future, pred_len, J, seq.path_joint);
    s.target = std::move(centered);
    s.target_path = std::move(path);
    const Frame& last_obs = seq.frames[start + obs_len - 1];
    for (std::size_t d = 0; d < 3; ++d) s.offset[d] = last_obs.p3d[seq.path_joint * 3 + d];
    samples.push_back(std::move(s));
  }
  return samples;
}

Motion motion_from_string(const std::string& s) {
  if (s == "static") return Motion::static_pose;
  if (s == "linear") return Motion::linear;
  if (s == "gait") return Motion::gait;
  throw UsageError("unknown motion '" + s + "' (expected static|linear|gait)");
}

std::string motion_to_string(Motion m) {
  switch (m) {
    case Motion::static_pose: return "static";
    case Motion::linear: return "linear";
    case Motion::gait: return "gait";
  }
  return "?";
}

namespace {

// Bone directions are exact unit vectors, so limb lengths are rigid by
// construction: u = (sin t * cos a, cos t, sin t * sin a).
std::array<double, 3> unit_dir(double tilt, double azimuth) {
  return {std::sin(tilt) * std::cos(azimuth), std::cos(tilt), std::sin(tilt) * std::sin(azimuth)};
}

void render_frame_image(const SkeletonSequence& seq, std::size_t frame_idx, std::size_t seq_idx,
                        std::size_t size, const std::string& path) {
  Image img;
  img.width = size;
  img.height = size;
  img.rgb.assign(3 * size * size, 0.0);
  const double hue = 0.15 + 0.07 * static_cast<double>(seq_idx % 10);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double gx = static_cast<double>(x) / static_cast<double>(size - 1);
        const double gy = static_cast<double>(y) / static_cast<double>(size - 1);
        img.rgb[(c * size + y) * size + x] =
            0.2 + 0.1 * static_cast<double>(c) + 0.25 * gx + hue * gy;
      }
    }
  }
  // project the sequence 2D bbox into the image and mark the joints
  double lo[2] = {seq.frames[0].p2d[0], seq.frames[0].p2d[1]};
  double hi[2] = {lo[0], lo[1]};
  for (const Frame& f : seq.frames) {
    for (std::size_t j = 0; j < seq.joints; ++j) {
      for (std::size_t a = 0; a < 2; ++a) {
        lo[a] = std::min(lo[a], f.p2d[j * 2 + a]);
        hi[a] = std::max(hi[a], f.p2d[j * 2 + a]);
      }
    }
  }
  const Frame& f = seq.frames[frame_idx];
  for (std::size_t j = 0; j < seq.joints; ++j) {
    double px[2];
    for (std::size_t a = 0; a < 2; ++a) {
      const double range = hi[a] - lo[a];
      const double unit = range > 1e-12 ? (f.p2d[j * 2 + a] - lo[a]) / range : 0.5;
      px[a] = 4.0 + unit * (static_cast<double>(size) - 9.0);
    }
    const auto cx = static_cast<std::size_t>(px[0]);
    const auto cy = static_cast<std::size_t>(px[1]);
    for (std::size_t dy = 0; dy < 2; ++dy)
      for (std::size_t dx = 0; dx < 2; ++dx)
        for (std::size_t c = 0; c < 3; ++c)
          img.rgb[(c * size + std::min(cy + dy, size - 1)) * size + std::min(cx + dx, size - 1)] =
              1.0;
  }
  save_ppm(img, path);
}

}  // namespace

std::vector<SkeletonSequence> synthesize(const SynthConfig& config) {
  if (config.joints < 2) throw UsageError("synthesize: at least 2 joints required");
  if (config.fps <= 0) throw UsageError("synthesize: fps must be positive");
  if (config.images && config.image_dir.empty()) {
    throw UsageError("synthesize: image output requested without image_dir");
  }
  if (config.images) fs::create_directories(config.image_dir);

  std::vector<SkeletonSequence> sequences;
  sequences.reserve(config.n_sequences);
  for (std::size_t si = 0; si < config.n_sequences; ++si) {
    std::mt19937_64 rng(config.seed + si);  // one stream per sequence
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    SkeletonSequence seq;
    seq.joints = config.joints;
    seq.fps = config.fps;
    seq.path_joint = 0;
    for (std::size_t j = 0; j + 1 < config.joints; ++j) {
      seq.bones.emplace_back(static_cast<int>(j), static_cast<int>(j + 1));
    }

    const double phase = 2.0 * M_PI * unit(rng);
    const std::array<double, 3> start = {unit(rng) - 0.5, unit(rng) - 0.5, 2.0 + unit(rng)};
    const double swing_amp = config.motion == Motion::gait ? 0.5 : 0.0;
    const double omega = 2.0 * M_PI * 1.0;  // 1 Hz gait cycle
    const bool moving = config.motion != Motion::static_pose;

    std::normal_distribution<double> noise(0.0, config.noise_std);
    seq.frames.resize(config.length);
    for (std::size_t t = 0; t < config.length; ++t) {
      Frame& f = seq.frames[t];
      f.p3d.resize(config.joints * 3);
      f.p2d.resize(config.joints * 2);
      const double time = static_cast<double>(t) / config.fps;
      std::array<double, 3> pos = start;
      if (moving) {
        for (std::size_t d = 0; d < 3; ++d) pos[d] += config.velocity[d] * time;
      }
      for (std::size_t d = 0; d < 3; ++d) f.p3d[d] = pos[d];
      for (std::size_t j = 1; j < config.joints; ++j) {
        const double base_tilt = 1.0 + 0.3 * static_cast<double>(j % 2);
        const double azimuth = 0.6 * static_cast<double>(j);
        const double tilt =
            base_tilt + swing_amp * std::sin(omega * time + phase + 0.9 * static_cast<double>(j));
        const auto dir = unit_dir(tilt, azimuth);
        for (std::size_t d = 0; d < 3; ++d) {
          f.p3d[j * 3 + d] = f.p3d[(j - 1) * 3 + d] + config.bone_length * dir[d];
        }
      }
      for (std::size_t j = 0; j < config.joints; ++j) {
        f.p2d[j * 2] = f.p3d[j * 3];
        f.p2d[j * 2 + 1] = f.p3d[j * 3 + 1];
        if (config.noise_std > 0) {
          f.p2d[j * 2] += noise(rng);
          f.p2d[j * 2 + 1] += noise(rng);
        }
      }
    }
    if (config.images) {
      for (std::size_t t = 0; t < config.length; ++t) {
        char name[64];
        std::snprintf(name, sizeof(name), "seq%03zu_f%04zu.ppm", si, t);
        render_frame_image(seq, t, si, config.image_size,
                           (fs::path(config.image_dir) / name).string());
        seq.frames[t].image = config.image_ref_prefix + name;
      }
      seq.base_dir = fs::path(config.image_dir).parent_path().string();
    }
    sequences.push_back(std::move(seq));
  }
  return sequences;
}

// ============================================================================
// SKELSEQ JSON round trip
// ============================================================================

SkeletonSequence load_sequence(const std::string& path) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  try {
    if (!doc.is_object() || doc.at("version").get<int>() != 1) {
      throw FormatError(path + ": unsupported SKELSEQ version");
    }
    SkeletonSequence seq;
    seq.joints = doc.at("joints").get<std::size_t>();
    seq.fps = doc.at("fps").get<double>();
    seq.path_joint = doc.at("path_joint").get<std::size_t>();
    if (seq.joints == 0) throw FormatError(path + ": joints must be positive");
    if (seq.fps <= 0) throw FormatError(path + ": fps must be positive");
    if (seq.path_joint >= seq.joints) throw FormatError(path + ": path_joint out of range");
    for (const auto& b : doc.at("bones")) {
      if (!b.is_array() || b.size() != 2) throw FormatError(path + ": bones must be [i,j] pairs");
      const int i = b[0].get<int>(), j = b[1].get<int>();
      if (i < 0 || j < 0 || static_cast<std::size_t>(i) >= seq.joints ||
          static_cast<std::size_t>(j) >= seq.joints) {
        throw FormatError(path + ": bone index out of range");
      }
      seq.bones.emplace_back(i, j);
    }
    const auto& frames = doc.at("frames");
    if (!frames.is_array() || frames.empty()) throw FormatError(path + ": frames must be non-empty");
    seq.frames.reserve(frames.size());
    std::size_t fi = 0;
    for (const auto& jf : frames) {
      Frame f;
      const auto& p2d = jf.at("p2d");
      const auto& p3d = jf.at("p3d");
      if (p2d.size() != seq.joints || p3d.size() != seq.joints) {
        throw FormatError(path + ": frame " + std::to_string(fi) + " joint count mismatch");
      }
      for (const auto& row : p2d) {
        if (row.size() != 2) throw FormatError(path + ": frame " + std::to_string(fi) + " bad p2d row");
        for (const auto& v : row) f.p2d.push_back(v.get<double>());
      }
      for (const auto& row : p3d) {
        if (row.size() != 3) throw FormatError(path + ": frame " + std::to_string(fi) + " bad p3d row");
        for (const auto& v : row) f.p3d.push_back(v.get<double>());
      }
      for (double v : f.p2d)
        if (!std::isfinite(v)) throw FormatError(path + ": non-finite p2d in frame " + std::to_string(fi));
      for (double v : f.p3d)
        if (!std::isfinite(v)) throw FormatError(path + ": non-finite p3d in frame " + std::to_string(fi));
      if (jf.contains("image")) f.image = jf.at("image").get<std::string>();
      seq.frames.push_back(std::move(f));
      ++fi;
    }
    seq.base_dir = fs::path(path).parent_path().string();
    return seq;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
}

void save_sequence(const SkeletonSequence& seq, const std::string& path) {
  nlohmann::json doc;
  doc["version"] = 1;
  doc["joints"] = seq.joints;
  doc["fps"] = seq.fps;
  auto& bones = doc["bones"] = nlohmann::json::array();
  for (const auto& [a, b] : seq.bones) bones.push_back({a, b});
  doc["path_joint"] = seq.path_joint;
  auto& frames = doc["frames"] = nlohmann::json::array();
  for (const Frame& f : seq.frames) {
    nlohmann::json jf;
    auto& p2d = jf["p2d"] = nlohmann::json::array();
    for (std::size_t j = 0; j < seq.joints; ++j) p2d.push_back({f.p2d[j * 2], f.p2d[j * 2 + 1]});
    auto& p3d = jf["p3d"] = nlohmann::json::array();
    for (std::size_t j = 0; j < seq.joints; ++j) {
      p3d.push_back({f.p3d[j * 3], f.p3d[j * 3 + 1], f.p3d[j * 3 + 2]});
    }
    if (!f.image.empty()) jf["image"] = f.image;
    frames.push_back(std::move(jf));
  }
  write_file_atomic(path, doc.dump());
}

std::string resolve_image_ref(const SkeletonSequence& seq, const std::string& ref) {
  if (ref.empty() || seq.base_dir.empty() || fs::path(ref).is_absolute()) return ref;
  return (fs::path(seq.base_dir) / ref).string();
}

// ============================================================================
// PPM images
// ============================================================================

Image load_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open image " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw FormatError(path + ": not a binary PPM");
  auto next_token = [&]() -> long {
    // skip whitespace and '#' comments
    while (true) {
      const int c = in.peek();
      if (c == '#') {
        std::string line;
        std::getline(in, line);
      } else if (std::isspace(c)) {
        in.get();
      } else {
        break;
      }
    }
    long v = -1;
    in >> v;
    return v;
  };
  const long w = next_token(), h = next_token(), maxval = next_token();
  if (w <= 0 || h <= 0 || maxval != 255) throw FormatError(path + ": unsupported PPM header");
  in.get();  // single whitespace after header
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
    throw FormatError(path + ": truncated PPM payload");
  }
  Image img;
  img.width = static_cast<std::size_t>(w);
  img.height = static_cast<std::size_t>(h);
  img.rgb.resize(raw.size());
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        img.rgb[(c * img.height + y) * img.width + x] =
            raw[(y * img.width + x) * 3 + c] / 255.0;
  return img;
}

void save_ppm(const Image& img, const std::string& path) {
  std::ostringstream os;
  os << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::string payload(img.width * img.height * 3, '\0');
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(img.rgb[(c * img.height + y) * img.width + x], 0.0, 1.0);
        payload[(y * img.width + x) * 3 + c] = static_cast<char>(std::lround(v * 255.0));
      }
  write_file_atomic(path, os.str() + payload);
}

Image resize_bilinear(const Image& img, std::size_t width, std::size_t height) {
  if (img.width == width && img.height == height) return img;
  Image out;
  out.width = width;
  out.height = height;
  out.rgb.resize(3 * width * height);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < height; ++y) {
      const double sy = height > 1
                            ? static_cast<double>(y) * (img.height - 1) / (height - 1)
                            : 0.0;
      const auto y0 = static_cast<std::size_t>(sy);
      const std::size_t y1 = std::min(y0 + 1, img.height - 1);
      const double fy = sy - static_cast<double>(y0);
      for (std::size_t x = 0; x < width; ++x) {
        const double sx = width > 1
                              ? static_cast<double>(x) * (img.width - 1) / (width - 1)
                              : 0.0;
        const auto x0 = static_cast<std::size_t>(sx);
        const std::size_t x1 = std::min(x0 + 1, img.width - 1);
        const double fx = sx - static_cast<double>(x0);
        auto at = [&](std::size_t yy, std::size_t xx) {
          return img.rgb[(c * img.height + yy) * img.width + xx];
        };
        out.rgb[(c * height + y) * width + x] =
            (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
            fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
      }
    }
  }
  return out;
}

// ============================================================================
// File helpers
// ============================================================================

void write_file_atomic(const std::string& path, const std::string& contents) {
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw FormatError("short write to " + tmp.string());
  }
  fs::rename(tmp, target);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace skelgraph
