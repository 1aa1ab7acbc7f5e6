#include "skelgraph/metrics.hpp"

#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "skelgraph/errors.hpp"

namespace skelgraph {

namespace {

constexpr double kMetersToMm = 1000.0;

double curve_mean(const std::vector<double>& c) {
  return std::accumulate(c.begin(), c.end(), 0.0) / static_cast<double>(c.size());
}

double curve_population_var(const std::vector<double>& c) {
  const double mu = curve_mean(c);
  double acc = 0;
  for (double v : c) acc += (v - mu) * (v - mu);
  return acc / static_cast<double>(c.size());
}

void check_curves(const std::vector<double>& pose, const std::vector<double>& path) {
  if (pose.empty() || path.empty()) throw UsageError("metrics: empty error curve");
  if (pose.size() != path.size()) throw UsageError("metrics: curve length mismatch");
}

}  // namespace

std::vector<double> mpjpe_curve(const std::vector<double>& truth, const std::vector<double>& pred,
                                std::size_t timesteps, std::size_t joints,
                                std::optional<std::size_t> joint) {
  if (truth.size() != timesteps * joints * 3 || pred.size() != truth.size()) {
    throw UsageError("mpjpe_curve: buffer size does not match T x J x 3");
  }
  if (joint && *joint >= joints) throw UsageError("mpjpe_curve: joint index out of range");
  std::vector<double> curve(timesteps, 0.0);
  for (std::size_t t = 0; t < timesteps; ++t) {
    double acc = 0;
    std::size_t count = 0;
    for (std::size_t j = 0; j < joints; ++j) {
      if (joint && *joint != j) continue;
      const std::size_t off = (t * joints + j) * 3;
      const double dx = pred[off] - truth[off];
      const double dy = pred[off + 1] - truth[off + 1];
      const double dz = pred[off + 2] - truth[off + 2];
      acc += std::sqrt(dx * dx + dy * dy + dz * dz);
      ++count;
    }
    curve[t] = kMetersToMm * acc / static_cast<double>(count);
  }
  return curve;
}

std::vector<double> trajectory_curve(const std::vector<double>& truth,
                                     const std::vector<double>& pred, std::size_t timesteps) {
  if (truth.size() != timesteps * 3 || pred.size() != truth.size()) {
    throw UsageError("trajectory_curve: buffer size does not match T x 3");
  }
  return mpjpe_curve(truth, pred, timesteps, 1, 0);
}

double ade(const std::vector<double>& pose_curve, const std::vector<double>& path_curve) {
  check_curves(pose_curve, path_curve);
  return (curve_mean(pose_curve) + curve_mean(path_curve)) / 2.0;
}

double fde(const std::vector<double>& pose_curve, const std::vector<double>& path_curve) {
  check_curves(pose_curve, path_curve);
  return (pose_curve.back() + path_curve.back()) / 2.0;
}

double stb_sigma(const std::vector<double>& pose_curve, const std::vector<double>& path_curve) {
  check_curves(pose_curve, path_curve);
  return std::sqrt((curve_population_var(pose_curve) + curve_population_var(path_curve)) / 2.0);
}

MetricsReport assemble_report(std::vector<double> pose_curve, std::vector<double> path_curve,
                              double fps) {
  if (fps <= 0) throw UsageError("assemble_report: fps must be positive");
  check_curves(pose_curve, path_curve);
  MetricsReport r;
  r.ade = ade(pose_curve, path_curve);
  r.fde = fde(pose_curve, path_curve);
  r.stb_sigma = stb_sigma(pose_curve, path_curve);
  // 0-based end-of-interval samples at round(fps*s)-1
  for (double s : {0.5, 1.0, 1.5, 2.0}) {
    const double idx_d = std::round(fps * s) - 1.0;
    if (idx_d < 0 || idx_d >= static_cast<double>(pose_curve.size())) {
      r.sampled_checkpoints.truncated = true;
      continue;
    }
    const auto idx = static_cast<std::size_t>(idx_d);
    r.sampled_checkpoints.seconds.push_back(s);
    r.sampled_checkpoints.pose.push_back(pose_curve[idx]);
    r.sampled_checkpoints.path.push_back(path_curve[idx]);
  }
  r.pose_curve = std::move(pose_curve);
  r.path_curve = std::move(path_curve);
  return r;
}

MetricsReport report(const std::vector<double>& truth, const std::vector<double>& pred,
                     std::size_t timesteps, std::size_t joints, std::size_t path_joint, double fps) {
  auto pose = mpjpe_curve(truth, pred, timesteps, joints);
  auto path = mpjpe_curve(truth, pred, timesteps, joints, path_joint);
  return assemble_report(std::move(pose), std::move(path), fps);
}

MetricsReport aggregate_reports(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw UsageError("aggregate_reports: no reports");
  MetricsReport agg = reports.front();
  for (std::size_t i = 1; i < reports.size(); ++i) {
    const MetricsReport& r = reports[i];
    if (r.pose_curve.size() != agg.pose_curve.size() ||
        r.sampled_checkpoints.pose.size() != agg.sampled_checkpoints.pose.size()) {
      throw UsageError("aggregate_reports: mismatched report shapes");
    }
    for (std::size_t t = 0; t < agg.pose_curve.size(); ++t) {
      agg.pose_curve[t] += r.pose_curve[t];
      agg.path_curve[t] += r.path_curve[t];
    }
    for (std::size_t t = 0; t < agg.sampled_checkpoints.pose.size(); ++t) {
      agg.sampled_checkpoints.pose[t] += r.sampled_checkpoints.pose[t];
      agg.sampled_checkpoints.path[t] += r.sampled_checkpoints.path[t];
    }
    agg.ade += r.ade;
    agg.fde += r.fde;
    agg.stb_sigma += r.stb_sigma;
    agg.sampled_checkpoints.truncated |= r.sampled_checkpoints.truncated;
  }
  const auto n = static_cast<double>(reports.size());
  for (double& v : agg.pose_curve) v /= n;
  for (double& v : agg.path_curve) v /= n;
  for (double& v : agg.sampled_checkpoints.pose) v /= n;
  for (double& v : agg.sampled_checkpoints.path) v /= n;
  agg.ade /= n;
  agg.fde /= n;
  agg.stb_sigma /= n;
  return agg;
}

nlohmann::json MetricsReport::to_json() const {
  return nlohmann::json{
      {"pose_curve", pose_curve},
      {"path_curve", path_curve},
      {"ade", ade},
      {"fde", fde},
      {"stb_sigma", stb_sigma},
      {"sampled_checkpoints",
       {{"seconds", sampled_checkpoints.seconds},
        {"pose", sampled_checkpoints.pose},
        {"path", sampled_checkpoints.path},
        {"truncated", sampled_checkpoints.truncated}}},
  };
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  j.at("pose_curve").get_to(r.pose_curve);
  j.at("path_curve").get_to(r.path_curve);
  j.at("ade").get_to(r.ade);
  j.at("fde").get_to(r.fde);
  j.at("stb_sigma").get_to(r.stb_sigma);
  const auto& c = j.at("sampled_checkpoints");
  c.at("seconds").get_to(r.sampled_checkpoints.seconds);
  c.at("pose").get_to(r.sampled_checkpoints.pose);
  c.at("path").get_to(r.sampled_checkpoints.path);
  c.at("truncated").get_to(r.sampled_checkpoints.truncated);
  return r;
}

}  // namespace skelgraph
