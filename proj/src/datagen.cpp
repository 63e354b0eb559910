#include "popdyn/datagen.hpp"

#include <json.hpp>

#include <cmath>
#include <numbers>

namespace popdyn::data {

using nlohmann::json;

Mat DriftSpec::drift(const Mat& x) const {
  switch (kind) {
    case Kind::quadratic:
      return -2.0 * x;
    case Kind::styblinski: {
      // Phi = sum_j p(x_j)^2 with p(u) = 3u^3 - 32u + 5, so
      // dPhi/dx_j = 2 p(x_j) p'(x_j) with p'(u) = 9u^2 - 32.
      Eigen::ArrayXXd u = x.array();
      Eigen::ArrayXXd p = 3.0 * u.cube() - 32.0 * u + 5.0;
      Eigen::ArrayXXd dp = 9.0 * u.square() - 32.0;
      return (-2.0 * p * dp).matrix();
    }
    case Kind::styblinski_classical: {
      // Phi = 1/2 sum_j (x_j^4 - 16 x_j^2 + 5 x_j).
      Eigen::ArrayXXd u = x.array();
      return (-0.5 * (4.0 * u.cube() - 32.0 * u + 5.0)).matrix();
    }
    case Kind::custom:
      if (!custom_drift) throw ConfigError("datagen: custom drift callback not set");
      return custom_drift(x);
  }
  throw ConfigError("datagen: unknown drift kind");
}

DriftSpec::Kind DriftSpec::parse_kind(const std::string& name) {
  if (name == "quadratic") return Kind::quadratic;
  if (name == "styblinski") return Kind::styblinski;
  if (name == "styblinski-classical") return Kind::styblinski_classical;
  throw ConfigError("datagen: unknown potential kind '" + name + "'");
}

std::vector<Mat> euler_maruyama(const DriftSpec& drift, const Mat& x0, double dt, double sd,
                                int n_steps, std::uint64_t seed) {
  if (!(dt > 0.0)) throw ConfigError("datagen: dt must be positive");
  if (sd < 0.0) throw ConfigError("datagen: sd must be >= 0");
  if (n_steps < 0) throw ConfigError("datagen: n_steps must be >= 0");
  Rng rng(seed);
  std::vector<Mat> out;
  out.reserve(static_cast<std::size_t>(n_steps) + 1);
  out.push_back(x0);
  const double root_dt = std::sqrt(dt);
  Mat x = x0;
  for (int s = 0; s < n_steps; ++s) {
    Mat noise = rng.normal_mat(x.rows(), x.cols(), sd);
    x = x + drift.drift(x) * dt + noise * root_dt;
    out.push_back(x);
  }
  return out;
}

SnapshotDataset make_potential_dataset(const std::string& kind, Index n_points,
                                       std::uint64_t seed, const PotentialOptions& opt) {
  if (n_points < 1) throw ConfigError("datagen: n_points must be >= 1");
  if (opt.dim < 1) throw ConfigError("datagen: dim must be >= 1");

  DriftSpec spec;
  double dt = 0.0, sd = 0.0, horizon = 0.0;
  if (kind == "quadratic") {
    spec.kind = DriftSpec::Kind::quadratic;
    dt = 0.25;
    sd = 0.2;
    horizon = 1.0;
  } else if (kind == "styblinski") {
    spec.kind = opt.classical_styblinski ? DriftSpec::Kind::styblinski_classical
                                         : DriftSpec::Kind::styblinski;
    dt = 0.06;
    sd = 0.4;
    horizon = 0.5;
  } else {
    throw ConfigError("datagen: unknown potential kind '" + kind + "'");
  }
  const int n_steps = static_cast<int>(std::floor(horizon / dt + 1e-12));

  Vec offset = opt.offset.size() > 0 ? opt.offset : Vec(Vec::Zero(opt.dim));
  if (offset.size() != opt.dim)
    throw ShapeError("datagen: offset dimension does not match dim");

  Rng init_rng(Rng::derive(seed, 0));
  Mat x0 = opt.init_scale * init_rng.normal_mat(n_points, opt.dim, 1.0);
  x0.rowwise() += offset.transpose();

  std::vector<Mat> clouds = euler_maruyama(spec, x0, dt, sd, n_steps, Rng::derive(seed, 1));

  SnapshotDataset ds;
  ds.name = kind;
  ds.dim = opt.dim;
  ds.snapshots = std::move(clouds);
  for (int t = 0; t <= n_steps; ++t) ds.timestamps.push_back(dt * t);
  ds.generator = kind;
  json params{{"dt", dt},
              {"sd", sd},
              {"horizon", horizon},
              {"n_points", n_points},
              {"init_scale", opt.init_scale},
              {"offset", std::vector<double>(offset.data(), offset.data() + offset.size())},
              {"classical_styblinski", opt.classical_styblinski}};
  ds.params_json = params.dump();
  ds.seed = seed;
  ds.split = "train";
  return ds;
}

namespace {

constexpr int kWaypoints = 100;

// Number of transitions per trajectory kind.
int trajectory_transitions(const std::string& kind) {
  if (kind == "semicircle") return 5;
  if (kind == "spiral") return 10;
  if (kind == "line") return 2;
  throw ConfigError("datagen: unknown trajectory kind '" + kind + "'");
}

Mat trajectory_waypoints(const std::string& kind, const std::string& split) {
  Mat w(kWaypoints, 2);
  const double pi = std::numbers::pi;
  for (int j = 0; j < kWaypoints; ++j) {
    const double s = static_cast<double>(j) / (kWaypoints - 1);  // 0 -> 1
    if (kind == "semicircle") {
      const double theta = 2.0 * pi * (1.0 - s);
      w(j, 0) = 10.0 * std::cos(theta);
      w(j, 1) = 10.0 * std::sin(theta);
    } else if (kind == "spiral") {
      const double r = 10.0 + (1.0 - 10.0) * s;
      const double theta = 2.75 * pi * (1.0 - s);
      w(j, 0) = r * std::cos(theta);
      w(j, 1) = r * std::sin(theta);
    } else if (kind == "line") {
      const double lo = split == "test" ? -5.0 : -10.0;
      const double hi = split == "test" ? 7.5 : -2.5;
      w(j, 0) = lo + (hi - lo) * s;
      w(j, 1) = 0.0;
    } else {
      throw ConfigError("datagen: unknown trajectory kind '" + kind + "'");
    }
  }
  return w;
}

}  // namespace

Mat trajectory_centers(const std::string& kind, const std::string& split) {
  const int T = trajectory_transitions(kind);
  Mat w = trajectory_waypoints(kind, split);
  Mat centers(T + 1, 2);
  for (int t = 0; t <= T; ++t) {
    // Uniform index spacing over the waypoints, inclusive of both endpoints.
    const int j = static_cast<int>(std::lround(static_cast<double>(t) * (kWaypoints - 1) / T));
    centers.row(t) = w.row(j);
  }
  return centers;
}

SnapshotDataset make_trajectory_dataset(const std::string& kind, Index n_points, double point_sd,
                                        std::uint64_t seed, const std::string& split) {
  if (n_points < 1) throw ConfigError("datagen: n_points must be >= 1");
  if (point_sd < 0.0) throw ConfigError("datagen: point_sd must be >= 0");
  if (split != "train" && split != "test")
    throw ConfigError("datagen: split must be 'train' or 'test'");

  Mat centers = trajectory_centers(kind, split);
  const Index T = centers.rows() - 1;

  SnapshotDataset ds;
  ds.name = kind;
  ds.dim = 2;
  for (Index t = 0; t <= T; ++t) {
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(t)));
    Mat cloud = rng.normal_mat(n_points, 2, point_sd);
    cloud.rowwise() += centers.row(t);
    ds.snapshots.push_back(std::move(cloud));
    ds.timestamps.push_back(static_cast<double>(t));
  }
  ds.generator = kind;
  json params{{"n_points", n_points}, {"point_sd", point_sd}, {"waypoints", kWaypoints}};
  ds.params_json = params.dump();
  ds.seed = seed;
  ds.split = split;
  return ds;
}

SnapshotDataset corrupt(const SnapshotDataset& ds, double fraction, double noise_scale,
                        std::uint64_t seed) {
  if (fraction < 0.0 || fraction > 1.0)
    throw ConfigError("datagen: corruption fraction must lie in [0, 1]");
  if (noise_scale < 0.0) throw ConfigError("datagen: noise_scale must be >= 0");
  ds.validate();

  SnapshotDataset out = ds;
  if (fraction == 0.0) return out;
  for (std::size_t t = 0; t < out.snapshots.size(); ++t) {
    Mat& cloud = out.snapshots[t];
    const Index n = cloud.rows();
    const Index k = static_cast<Index>(std::ceil(fraction * static_cast<double>(n) - 1e-12));
    if (k == 0) continue;
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(t)));
    std::vector<Index> hit = rng.sample_without_replacement(n, k);
    for (Index i : hit)
      for (Index j = 0; j < cloud.cols(); ++j)
        cloud(i, j) += rng.uniform(-noise_scale, noise_scale);
  }
  return out;
}

}  // namespace popdyn::data
