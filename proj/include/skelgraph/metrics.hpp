#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace skelgraph {

struct CheckpointSamples {
  std::vector<double> seconds;  // sampled horizons that fit the prediction
  std::vector<double> pose;     // mm
  std::vector<double> path;     // mm
  bool truncated = false;       // true when the horizon is shorter than 2 s
};

// Curves and scalars are in millimetres; poses are consumed in metres.
struct MetricsReport {
  std::vector<double> pose_curve;
  std::vector<double> path_curve;
  double ade = 0;
  double fde = 0;
  double stb_sigma = 0;
  CheckpointSamples sampled_checkpoints;

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

// Per-timestep mean joint error in mm. P/P_pred are row-major [T,J,3] metre
// buffers; `joint` restricts the mean to a single joint (the path variant).
std::vector<double> mpjpe_curve(const std::vector<double>& truth, const std::vector<double>& pred,
                                std::size_t timesteps, std::size_t joints,
                                std::optional<std::size_t> joint = std::nullopt);

// Trajectory variant over [T,3] metre buffers.
std::vector<double> trajectory_curve(const std::vector<double>& truth,
                                     const std::vector<double>& pred, std::size_t timesteps);

double ade(const std::vector<double>& pose_curve, const std::vector<double>& path_curve);
double fde(const std::vector<double>& pose_curve, const std::vector<double>& path_curve);
double stb_sigma(const std::vector<double>& pose_curve, const std::vector<double>& path_curve);

// Builds the report scalars and 0.5/1/1.5/2 s samples from mm curves.
MetricsReport assemble_report(std::vector<double> pose_curve, std::vector<double> path_curve,
                              double fps);

// Full report from metre pose buffers; path errors use `path_joint` only.
MetricsReport report(const std::vector<double>& truth, const std::vector<double>& pred,
                     std::size_t timesteps, std::size_t joints, std::size_t path_joint, double fps);

// Element-wise mean of per-sample reports (curves must share a length).
MetricsReport aggregate_reports(const std::vector<MetricsReport>& reports);

}  // namespace skelgraph
