#include "tempnoise/noise.hpp"

#include "tempnoise/error.hpp"
#include "tempnoise/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace tempnoise::noise {

namespace {

constexpr double kMaxRate = 0.5 - kFlipFloor;

struct FieldRef {
  const char* name;
  double FlipCurve::*member;
};

constexpr FieldRef kFields[] = {
    {"rho", &FlipCurve::rho},         {"rho_start", &FlipCurve::rho_start}, {"rho_end", &FlipCurve::rho_end},
    {"a", &FlipCurve::a},             {"b", &FlipCurve::b},                 {"gamma", &FlipCurve::gamma},
    {"alpha", &FlipCurve::alpha},     {"phi", &FlipCurve::phi},             {"offset", &FlipCurve::offset},
    {"amplitude", &FlipCurve::amplitude},
};

std::vector<std::string> fields_of(Shape shape) {
  switch (shape) {
    case Shape::Static: return {"rho"};
    case Shape::Linear: return {"rho_start", "rho_end"};
    case Shape::Decay: return {"a", "b", "offset"};
    case Shape::Growth: return {"a", "b", "gamma", "offset"};
    case Shape::Periodic: return {"alpha", "phi", "offset", "amplitude"};
  }
  return {};
}

double FlipCurve::*member_of(const std::string& name) {
  for (const auto& f : kFields)
    if (name == f.name) return f.member;
  return nullptr;
}

double clamp_rate(double raw, bool clamp) {
  if (!clamp) return raw;
  if (raw < kFlipFloor || raw > kMaxRate) {
    warn_once("noise-clamp", "flip rate outside [0.01, 0.49] clamped (reported once)");
    return std::clamp(raw, kFlipFloor, kMaxRate);
  }
  return raw;
}

FlipCurve curve_for(Shape shape, int T) {
  FlipCurve c;
  c.shape = shape;
  c.gamma = T / 2.0;
  c.alpha = 2.0 * std::numbers::pi / T;
  if (shape == Shape::Periodic) {
    c.offset = 0.5;
    c.amplitude = 0.5;
  }
  return c;
}

double mean_rate(const FlipCurve& curve, int T) {
  double total = 0.0;
  for (int t = 1; t <= T; ++t) total += std::clamp(raw_rate(curve, t, T), kFlipFloor, kMaxRate);
  return total / T;
}

// Offset making the time-averaged clamped rate equal `target`.
void calibrate_offset(FlipCurve& curve, int T, double target) {
  double lo = -1.0, hi = 1.0;
  for (int it = 0; it < 200; ++it) {
    curve.offset = 0.5 * (lo + hi);
    if (mean_rate(curve, T) < target)
      lo = curve.offset;
    else
      hi = curve.offset;
  }
  curve.offset = 0.5 * (lo + hi);
}

}  // namespace

std::string to_string(Family family) {
  switch (family) {
    case Family::Static: return "static";
    case Family::Linear: return "linear";
    case Family::Decay: return "decay";
    case Family::Growth: return "growth";
    case Family::Periodic: return "periodic";
    case Family::Mixed: return "mixed";
  }
  return "?";
}

std::string to_string(Shape shape) {
  switch (shape) {
    case Shape::Static: return "static";
    case Shape::Linear: return "linear";
    case Shape::Decay: return "decay";
    case Shape::Growth: return "growth";
    case Shape::Periodic: return "periodic";
  }
  return "?";
}

Family parse_family(const std::string& name) {
  for (Family f : {Family::Static, Family::Linear, Family::Decay, Family::Growth, Family::Periodic, Family::Mixed})
    if (to_string(f) == name) return f;
  throw ConfigError("unknown noise family '" + name + "'");
}

double raw_rate(const FlipCurve& c, double t, int T) {
  switch (c.shape) {
    case Shape::Static: return c.rho;
    case Shape::Linear:
      if (T <= 1) return c.rho_start;
      return c.rho_start + (c.rho_end - c.rho_start) * (t - 1.0) / (T - 1.0);
    case Shape::Decay: return c.offset + c.a * std::exp(-c.b * t);
    case Shape::Growth: return c.offset + c.a / (1.0 + std::exp(-c.b * (t - c.gamma)));
    case Shape::Periodic: return c.offset + c.amplitude * std::sin(c.alpha * t + c.phi);
  }
  return 0.0;
}

double flip_rate(const FlipCurve& curve, double t, int T) { return clamp_rate(raw_rate(curve, t, T), true); }

void NoiseFunctionSpec::validate() const {
  if (C < 2) throw ConfigError("noise spec: class count must be >= 2, got " + std::to_string(C));
  if (T < 1) throw ConfigError("noise spec: horizon must be >= 1, got " + std::to_string(T));
  if (static_cast<int>(rows.size()) != C)
    throw ConfigError("noise spec: expected " + std::to_string(C) + " row curves, got " + std::to_string(rows.size()));
  for (const auto& [ij, curve] : pairs) {
    const auto [i, j] = ij;
    if (i < 0 || j < 0 || i >= C || j >= C || i == j)
      throw ConfigError("noise spec: invalid class pair (" + std::to_string(i) + ", " + std::to_string(j) + ")");
  }
}

NoiseFunctionSpec make_spec(Family family, int C, int T) {
  NoiseFunctionSpec spec;
  spec.family = family;
  spec.C = C;
  spec.T = T;
  for (int i = 0; i < C; ++i) {
    Shape shape = Shape::Static;
    switch (family) {
      case Family::Static: shape = Shape::Static; break;
      case Family::Linear: shape = Shape::Linear; break;
      case Family::Decay: shape = Shape::Decay; break;
      case Family::Growth: shape = Shape::Growth; break;
      case Family::Periodic: shape = Shape::Periodic; break;
      case Family::Mixed: shape = i == 0 ? Shape::Growth : (i == 1 ? Shape::Decay : Shape::Static); break;
    }
    spec.rows.push_back(curve_for(shape, T));
  }
  return spec;
}

NoiseFunctionSpec identity_spec(int C, int T) {
  NoiseFunctionSpec spec = make_spec(Family::Static, C, T);
  for (auto& row : spec.rows) row.rho = 0.0;
  spec.clamp = false;
  return spec;
}

NoiseFunctionSpec standard_regime(Family family, int C, int T, double target_mean) {
  NoiseFunctionSpec spec = make_spec(family, C, T);
  for (int i = 0; i < C; ++i) {
    FlipCurve& c = spec.rows[i];
    switch (c.shape) {
      case Shape::Static: c.rho = target_mean; break;
      case Shape::Linear:
        c.rho_start = target_mean + 0.15;
        c.rho_end = target_mean - 0.15;
        break;
      case Shape::Decay:
        c.a = 0.3;
        c.b = 4.0 / T;
        calibrate_offset(c, T, target_mean);
        break;
      case Shape::Growth:
        c.a = 0.3;
        c.b = 10.0 / T;
        c.gamma = T / 2.0;
        calibrate_offset(c, T, target_mean);
        break;
      case Shape::Periodic:
        c.amplitude = 0.2;
        c.alpha = 2.0 * std::numbers::pi / T;
        c.phi = -std::numbers::pi / 2.0 + 2.0 * std::numbers::pi * i / C;
        calibrate_offset(c, T, target_mean);
        break;
    }
  }
  return spec;
}

std::map<std::string, double> to_param_map(const NoiseFunctionSpec& spec) {
  std::map<std::string, double> out;
  if (!spec.clamp) out["clamp"] = 0.0;
  for (int i = 0; i < spec.C; ++i) {
    const FlipCurve& c = spec.rows[i];
    for (const auto& f : fields_of(c.shape)) out["row" + std::to_string(i) + "." + f] = c.*member_of(f);
  }
  for (const auto& [ij, c] : spec.pairs) {
    const std::string prefix = "pair" + std::to_string(ij.first) + "_" + std::to_string(ij.second) + ".";
    for (const auto& f : fields_of(c.shape)) out[prefix + f] = c.*member_of(f);
  }
  return out;
}

NoiseFunctionSpec from_param_map(Family family, int C, int T, const std::map<std::string, double>& params) {
  NoiseFunctionSpec spec = make_spec(family, C, T);
  auto field = [](const std::string& key, const std::string& name) {
    auto m = member_of(name);
    if (!m) throw ConfigError("noise spec: unknown parameter '" + key + "'");
    return m;
  };
  // Global keys first, then row overrides, then pair overrides.
  for (const auto& [key, value] : params) {
    if (key == "clamp") {
      spec.clamp = value != 0.0;
      continue;
    }
    if (key.find('.') != std::string::npos) continue;
    auto m = field(key, key);
    for (auto& row : spec.rows) row.*m = value;
  }
  for (const auto& [key, value] : params) {
    if (key.rfind("row", 0) != 0 || key.find('.') == std::string::npos) continue;
    const auto dot = key.find('.');
    int i = -1;
    try {
      i = std::stoi(key.substr(3, dot - 3));
    } catch (const std::exception&) {
      throw ConfigError("noise spec: malformed key '" + key + "'");
    }
    if (i < 0 || i >= C) throw ConfigError("noise spec: row index out of range in '" + key + "'");
    spec.rows[i].*field(key, key.substr(dot + 1)) = value;
  }
  // A pair's shape is the first one whose fields cover every key given for it.
  std::map<std::pair<int, int>, std::map<std::string, double>> pair_fields;
  for (const auto& [key, value] : params) {
    if (key.rfind("pair", 0) != 0) continue;
    const auto dot = key.find('.');
    const auto us = key.find('_');
    if (dot == std::string::npos || us == std::string::npos || us > dot)
      throw ConfigError("noise spec: malformed key '" + key + "'");
    int i = -1, j = -1;
    try {
      i = std::stoi(key.substr(4, us - 4));
      j = std::stoi(key.substr(us + 1, dot - us - 1));
    } catch (const std::exception&) {
      throw ConfigError("noise spec: malformed key '" + key + "'");
    }
    if (i < 0 || i >= C || j < 0 || j >= C || i == j)
      throw ConfigError("noise spec: invalid class pair in '" + key + "'");
    const std::string name = key.substr(dot + 1);
    field(key, name);
    pair_fields[{i, j}][name] = value;
  }
  for (const auto& [ij, fields] : pair_fields) {
    FlipCurve curve = spec.rows[ij.first];
    for (Shape shape : {Shape::Static, Shape::Linear, Shape::Decay, Shape::Growth, Shape::Periodic}) {
      const auto names = fields_of(shape);
      const bool covers = std::all_of(fields.begin(), fields.end(), [&](const auto& f) {
        return std::find(names.begin(), names.end(), f.first) != names.end();
      });
      if (covers) {
        if (shape != curve.shape) curve = curve_for(shape, T);
        break;
      }
    }
    for (const auto& [name, value] : fields) curve.*member_of(name) = value;
    spec.pairs[ij] = curve;
  }
  for (const auto& [key, value] : params) {
    if (key.find('.') == std::string::npos) continue;
    if (key.rfind("row", 0) != 0 && key.rfind("pair", 0) != 0)
      throw ConfigError("noise spec: unknown parameter '" + key + "'");
  }
  spec.validate();
  return spec;
}

Matrix eval_noise(const NoiseFunctionSpec& spec, int t) {
  spec.validate();
  if (t < 1 || t > spec.T)
    throw ConfigError("eval_noise: t = " + std::to_string(t) + " outside [1, " + std::to_string(spec.T) + "]");
  const int C = spec.C;
  Matrix q = Matrix::Zero(C, C);
  for (int i = 0; i < C; ++i) {
    const double row_rate = clamp_rate(raw_rate(spec.rows[i], t, spec.T), spec.clamp);
    double off = 0.0;
    for (int j = 0; j < C; ++j) {
      if (j == i) continue;
      auto it = spec.pairs.find({i, j});
      q(i, j) = it == spec.pairs.end() ? row_rate / (C - 1)
                                       : clamp_rate(raw_rate(it->second, t, spec.T), spec.clamp);
      off += q(i, j);
    }
    if (spec.clamp && off > kMaxRate) {
      warn_once("noise-pair-mass", "per-pair flip mass above 0.49 rescaled (reported once)");
      for (int j = 0; j < C; ++j)
        if (j != i) q(i, j) *= kMaxRate / off;
      off = kMaxRate;
    }
    q(i, i) = 1.0 - off;
  }
  return q;
}

Matrix NoiseTrajectory::at(int k) const { return Eigen::Map<const Matrix>(flat.row(k).data(), C, C); }

void NoiseTrajectory::set(int k, const Matrix& q) {
  Eigen::Map<Matrix>(flat.row(k).data(), C, C) = q;
}

NoiseTrajectory NoiseTrajectory::repeat(const Matrix& q, int T) {
  NoiseTrajectory out;
  out.C = static_cast<int>(q.rows());
  out.flat.resize(T, q.size());
  for (int k = 0; k < T; ++k) out.set(k, q);
  return out;
}

NoiseTrajectory sample_trajectory(const NoiseFunctionSpec& spec) {
  NoiseTrajectory out;
  out.C = spec.C;
  out.flat.resize(spec.T, spec.C * spec.C);
  for (int t = 1; t <= spec.T; ++t) out.set(t - 1, eval_noise(spec, t));
  return out;
}

ValidationReport validate_matrix(const Matrix& q) {
  ValidationReport report;
  auto fail = [&](std::string msg) {
    report.ok = false;
    report.violations.push_back(std::move(msg));
  };
  if (q.rows() != q.cols() || q.rows() < 1) {
    std::ostringstream os;
    os << "matrix is " << q.rows() << "x" << q.cols() << ", expected square";
    fail(os.str());
    return report;
  }
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    for (Eigen::Index j = 0; j < q.cols(); ++j) {
      if (!(q(i, j) >= 0.0 && q(i, j) <= 1.0)) {
        std::ostringstream os;
        os << "entry (" << i << ", " << j << ") = " << q(i, j) << " outside [0, 1]";
        fail(os.str());
      }
    }
    const double s = q.row(i).sum();
    if (!(std::abs(s - 1.0) <= kRowSumTolerance)) {
      std::ostringstream os;
      os.precision(17);
      os << "row " << i << " sums to " << s << ", not 1";
      fail(os.str());
    }
    for (Eigen::Index j = 0; j < q.cols(); ++j) {
      if (j != i && !(q(i, i) > q(i, j))) {
        fail("row " + std::to_string(i) + " not diagonally dominant");
        break;
      }
    }
  }
  return report;
}

ValidationReport validate_trajectory(const NoiseTrajectory& trajectory) {
  ValidationReport report;
  if (trajectory.flat.cols() != static_cast<Eigen::Index>(trajectory.C) * trajectory.C) {
    report.ok = false;
    report.violations.push_back("trajectory width does not match C*C");
    return report;
  }
  for (int k = 0; k < trajectory.T(); ++k) {
    auto r = validate_matrix(trajectory.at(k));
    for (auto& v : r.violations) {
      report.ok = false;
      report.violations.push_back("t=" + std::to_string(k + 1) + ": " + v);
    }
  }
  return report;
}

SequenceDataset corrupt_labels(SequenceDataset dataset, const NoiseFunctionSpec& spec, std::uint64_t seed) {
  dataset.validate();
  if (spec.C != dataset.C)
    throw ConfigError("corrupt_labels: noise spec has C = " + std::to_string(spec.C) + " but dataset has C = " +
                      std::to_string(dataset.C));
  if (spec.T != dataset.T)
    throw ConfigError("corrupt_labels: noise spec has T = " + std::to_string(spec.T) + " but dataset has T = " +
                      std::to_string(dataset.T));
  const NoiseTrajectory traj = sample_trajectory(spec);
  const int C = spec.C;
  for (std::size_t s = 0; s < dataset.sequences.size(); ++s) {
    Sequence& seq = dataset.sequences[s];
    Rng rng = make_rng(seed, s);
    std::vector<int> noisy(seq.clean_labels.size());
    for (int t = 0; t < dataset.T; ++t) {
      const int y = seq.clean_labels[t];
      const double u = uniform01(rng);
      double acc = 0.0;
      int drawn = C - 1;
      for (int j = 0; j < C; ++j) {
        acc += traj.flat(t, y * C + j);
        if (u < acc) {
          drawn = j;
          break;
        }
      }
      noisy[t] = drawn;
    }
    seq.noisy_labels = std::move(noisy);
  }
  return dataset;
}

Matrix average_noise(const NoiseFunctionSpec& spec) {
  const NoiseTrajectory traj = sample_trajectory(spec);
  RowVector mean = traj.flat.colwise().mean();
  Matrix q = Eigen::Map<const Matrix>(mean.data(), spec.C, spec.C);
  q.array().colwise() /= q.rowwise().sum().array();
  return q;
}

double approximation_error(const NoiseTrajectory& truth, const NoiseTrajectory& estimate) {
  if (truth.C != estimate.C || truth.T() != estimate.T() || truth.flat.cols() != estimate.flat.cols())
    throw ConfigError("approximation_error: trajectories differ in shape (T=" + std::to_string(truth.T()) +
                      ", C=" + std::to_string(truth.C) + " vs T=" + std::to_string(estimate.T()) +
                      ", C=" + std::to_string(estimate.C) + ")");
  double total = 0.0;
  for (int k = 0; k < truth.T(); ++k) total += (truth.flat.row(k) - estimate.flat.row(k)).cwiseAbs().mean();
  return total / truth.T();
}

Matrix repair_dominance(Matrix q, double margin) {
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    bool violated = false;
    for (Eigen::Index j = 0; j < q.cols(); ++j)
      if (j != i && !(q(i, i) > q(i, j))) violated = true;
    if (!violated) continue;
    double weight = 0.0;
    for (Eigen::Index j = 0; j < q.cols(); ++j) {
      if (j == i) continue;
      const double gap = q(i, i) - q(i, j);
      if (gap < margin) weight = std::max(weight, (margin - gap) / (1.0 - gap));
    }
    weight = std::clamp(weight, 0.0, 1.0);
    q.row(i) *= 1.0 - weight;
    q(i, i) += weight;
  }
  return q;
}

}  // namespace tempnoise::noise
