#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace skelgraph {

// Observed 2D skeleton motion as a spatio-temporal graph: per-frame vertices
// plus a binary adjacency built from the bone topology (ones on bones and
// self-loops).
struct SpatioTemporalGraph {
  std::size_t timesteps = 0;
  std::size_t joints = 0;
  std::vector<double> vertices;                    // T*J*2, window-normalized
  std::vector<double> adjacency;                   // T*J*J
  std::vector<std::pair<int, int>> topology;       // bone list
};

struct Frame {
  std::vector<double> p2d;  // J*2 image-plane coordinates
  std::vector<double> p3d;  // J*3 metres, camera frame
  std::string image;        // optional image reference (relative to base_dir)
};

struct SkeletonSequence {
  std::size_t joints = 0;
  double fps = 30.0;
  std::vector<std::pair<int, int>> bones;
  std::size_t path_joint = 0;
  std::vector<Frame> frames;
  std::string base_dir;  // resolution root for image refs; not serialized
};

// One training/evaluation window. Targets are stored per-frame torso-centered
// with the absolute torso trajectory kept alongside; the model-frame target
// (everything relative to the last observed torso position) is derived.
struct Sample {
  SpatioTemporalGraph obs_graph;
  std::size_t pred_len = 0;
  std::vector<double> target;       // pred_len*J*3, torso row zeroed
  std::vector<double> target_path;  // pred_len*3, absolute
  std::array<double, 3> offset{};   // torso at the last observed frame
  std::vector<std::string> images;  // resolved refs for the observed frames
  std::size_t path_joint = 0;
  double fps = 30.0;

  std::vector<double> model_target() const;
};

// T copies of the symmetric binary J x J adjacency (bones + self-loops).
std::vector<double> build_adjacency(const std::vector<std::pair<int, int>>& bones,
                                    std::size_t joints, std::size_t timesteps);

// Symmetric degree normalization D^-1/2 A D^-1/2, applied per timestep.
std::vector<double> normalize_adjacency_symmetric(const std::vector<double>& adjacency,
                                                  std::size_t joints, std::size_t timesteps);

// frames: L*J*3 -> (centered L*J*3 with torso rows zeroed, path L*3).
std::pair<std::vector<double>, std::vector<double>> center_on_torso(
    const std::vector<double>& frames, std::size_t length, std::size_t joints,
    std::size_t path_joint);

// Inverse of center_on_torso.
std::vector<double> attach_path(const std::vector<double>& centered,
                                const std::vector<double>& path, std::size_t length,
                                std::size_t joints);

// Maps each 2D axis of the observation window onto [-1, 1].
std::vector<double> normalize_window(const std::vector<double>& p2d, std::size_t timesteps,
                                     std::size_t joints);

std::vector<Sample> window_samples(const SkeletonSequence& seq, std::size_t obs_len,
                                   std::size_t pred_len, std::size_t stride);

enum class Motion { static_pose, linear, gait };

Motion motion_from_string(const std::string& s);
std::string motion_to_string(Motion m);

struct SynthConfig {
  std::size_t n_sequences = 8;
  std::size_t length = 90;
  std::size_t joints = 5;
  double fps = 30.0;
  std::uint64_t seed = 0;
  Motion motion = Motion::gait;
  double bone_length = 0.25;
  std::array<double, 3> velocity{0.3, 0.0, 0.1};
  double noise_std = 0.0;          // isotropic noise on the projected 2D joints
  bool images = false;             // emit procedural PPM frames
  std::size_t image_size = 64;
  std::string image_dir;           // where PPM files are written
  std::string image_ref_prefix;    // stored in frames ahead of the file name
};

// Rigid chain skeleton; gait adds sinusoidal limb swing with a per-sequence
// random phase. Deterministic for a fixed seed.
std::vector<SkeletonSequence> synthesize(const SynthConfig& config);

// SKELSEQ v1 JSON document.
SkeletonSequence load_sequence(const std::string& path);
void save_sequence(const SkeletonSequence& seq, const std::string& path);

std::string resolve_image_ref(const SkeletonSequence& seq, const std::string& ref);

// Planar RGB image in [0,1], row-major per channel.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> rgb;  // 3*H*W
};

Image load_ppm(const std::string& path);
void save_ppm(const Image& img, const std::string& path);
Image resize_bilinear(const Image& img, std::size_t width, std::size_t height);

// Atomic text/binary file write: temp file in the same directory + rename.
void write_file_atomic(const std::string& path, const std::string& contents);
std::string read_file(const std::string& path);

}  // namespace skelgraph
