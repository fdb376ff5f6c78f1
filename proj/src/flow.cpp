#include "prnpe/flow.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>

namespace prnpe::flow {
namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);
// softplus(kShift) = 1, so a zero raw derivative gives unit slope.
const double kShift = std::log(std::numbers::e - 1.0);

double softplus(double u) { return u > 30.0 ? u : std::log1p(std::exp(u)); }
double sigmoid(double u) {
  if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
  const double e = std::exp(u);
  return e / (1.0 + e);
}

// Knot geometry for one coordinate, with what backprop needs.
struct Spline {
  int bins = 0;
  double bound = 8.0;
  std::vector<double> width, height;  // K
  std::vector<double> xk, yk;         // K + 1 knot positions
  std::vector<double> delta;          // K + 1 slopes, ends fixed at 1
  std::vector<double> pw, ph;         // softmax probabilities
  std::vector<double> ddelta;         // d δ_j / d raw_j for interior j
  double scale = 0.0;                 // 2·bound·(1 − K·min_bin)

  void resize(int k) {
    bins = k;
    width.resize(static_cast<std::size_t>(k));
    height.resize(static_cast<std::size_t>(k));
    pw.resize(static_cast<std::size_t>(k));
    ph.resize(static_cast<std::size_t>(k));
    xk.resize(static_cast<std::size_t>(k) + 1);
    yk.resize(static_cast<std::size_t>(k) + 1);
    delta.resize(static_cast<std::size_t>(k) + 1);
    ddelta.resize(static_cast<std::size_t>(k) + 1);
  }

  static void softmax(const double* u, int k, double* p) {
    double m = u[0];
    for (int i = 1; i < k; ++i) m = std::max(m, u[i]);
    double s = 0.0;
    for (int i = 0; i < k; ++i) {
      p[i] = std::exp(u[i] - m);
      s += p[i];
    }
    for (int i = 0; i < k; ++i) p[i] /= s;
  }

  void from_raw(const double* raw, int k, double b, double min_bin, double min_derivative) {
    if (bins != k) resize(k);
    bound = b;
    softmax(raw, k, pw.data());
    softmax(raw + k, k, ph.data());
    scale = 2.0 * b * (1.0 - k * min_bin);
    const double floor = 2.0 * b * min_bin;
    for (int i = 0; i < k; ++i) {
      width[static_cast<std::size_t>(i)] = floor + scale * pw[static_cast<std::size_t>(i)];
      height[static_cast<std::size_t>(i)] = floor + scale * ph[static_cast<std::size_t>(i)];
    }
    delta[0] = 1.0;
    delta[static_cast<std::size_t>(k)] = 1.0;
    for (int j = 1; j < k; ++j) {
      const double u = raw[2 * k + j - 1] + kShift;
      delta[static_cast<std::size_t>(j)] = min_derivative + (1.0 - min_derivative) * softplus(u);
      ddelta[static_cast<std::size_t>(j)] = (1.0 - min_derivative) * sigmoid(u);
    }
    fill_knots();
  }

  // Same as from_raw, with the transcendental parts precomputed.
  void from_cache(const double* p_w, const double* p_h, const double* d_int, const double* dd, int k,
                  double b, double min_bin) {
    if (bins != k) resize(k);
    bound = b;
    scale = 2.0 * b * (1.0 - k * min_bin);
    const double floor = 2.0 * b * min_bin;
    for (int i = 0; i < k; ++i) {
      const auto is = static_cast<std::size_t>(i);
      pw[is] = p_w[i];
      ph[is] = p_h[i];
      width[is] = floor + scale * p_w[i];
      height[is] = floor + scale * p_h[i];
    }
    delta[0] = 1.0;
    delta[static_cast<std::size_t>(k)] = 1.0;
    for (int j = 1; j < k; ++j) {
      delta[static_cast<std::size_t>(j)] = d_int[j - 1];
      ddelta[static_cast<std::size_t>(j)] = dd[j - 1];
    }
    fill_knots();
  }

  void from_knots(const RqsKnots& kn) {
    resize(kn.bins());
    bound = kn.bound;
    for (int i = 0; i < bins; ++i) {
      width[static_cast<std::size_t>(i)] = kn.widths[i];
      height[static_cast<std::size_t>(i)] = kn.heights[i];
    }
    delta[0] = 1.0;
    delta[static_cast<std::size_t>(bins)] = 1.0;
    for (int j = 1; j < bins; ++j) delta[static_cast<std::size_t>(j)] = kn.derivatives[j - 1];
    fill_knots();
  }

  void fill_knots() {
    xk[0] = -bound;
    yk[0] = -bound;
    for (int i = 0; i < bins; ++i) {
      xk[static_cast<std::size_t>(i) + 1] = xk[static_cast<std::size_t>(i)] + width[static_cast<std::size_t>(i)];
      yk[static_cast<std::size_t>(i) + 1] = yk[static_cast<std::size_t>(i)] + height[static_cast<std::size_t>(i)];
    }
    xk[static_cast<std::size_t>(bins)] = bound;
    yk[static_cast<std::size_t>(bins)] = bound;
  }

  static int locate(const std::vector<double>& knots, int k, double v) {
    const auto it = std::upper_bound(knots.begin() + 1, knots.begin() + k, v);
    return static_cast<int>(it - (knots.begin() + 1));
  }

  bool inside(double x) const { return x >= -bound && x <= bound; }

  // y and log dy/dx; when g_raw is given, accumulates g_y·∂y/∂raw + g_ld·∂ld/∂raw
  // and returns g_y·∂y/∂x + g_ld·∂ld/∂x through *g_x.
  double forward(double x, double* logdet, double g_y = 0.0, double g_ld = 0.0,
                 double* g_x = nullptr, double* g_raw = nullptr) const {
    if (!inside(x)) {
      *logdet = 0.0;
      if (g_x) *g_x = g_y;
      return x;
    }
    const int k = locate(xk, bins, x);
    const auto ks = static_cast<std::size_t>(k);
    const double w = width[ks];
    const double h = height[ks];
    const double s = h / w;
    const double d0 = delta[ks];
    const double d1 = delta[ks + 1];
    const double xi = (x - xk[ks]) / w;
    const double xi1 = xi * (1.0 - xi);
    const double a = s * xi * xi + d0 * xi1;
    const double c = d1 + d0 - 2.0 * s;
    const double den = s + c * xi1;
    const double q = d1 * xi * xi + 2.0 * s * xi1 + d0 * (1.0 - xi) * (1.0 - xi);
    const double y = yk[ks] + h * a / den;
    *logdet = 2.0 * std::log(s) + std::log(q) - 2.0 * std::log(den);
    if (!g_x) return y;

    const double den2 = den * den;
    // Partials wrt (ξ, s, h, y_k, δ_k, δ_{k+1}).
    const double y_xi = h * ((2.0 * s * xi + d0 * (1.0 - 2.0 * xi)) * den - a * c * (1.0 - 2.0 * xi)) / den2;
    const double y_s = h * (xi * xi * den - a * (1.0 - 2.0 * xi1)) / den2;
    const double y_h = a / den;
    const double y_d0 = h * (xi1 * den - a * xi1) / den2;
    const double y_d1 = -h * a * xi1 / den2;
    const double l_xi = (2.0 * d1 * xi + 2.0 * s * (1.0 - 2.0 * xi) - 2.0 * d0 * (1.0 - xi)) / q -
                        2.0 * c * (1.0 - 2.0 * xi) / den;
    const double l_s = 2.0 / s + 2.0 * xi1 / q - 2.0 * (1.0 - 2.0 * xi1) / den;
    const double l_d0 = (1.0 - xi) * (1.0 - xi) / q - 2.0 * xi1 / den;
    const double l_d1 = xi * xi / q - 2.0 * xi1 / den;

    const double g_xi = g_y * y_xi + g_ld * l_xi;
    const double g_s = g_y * y_s + g_ld * l_s;
    *g_x = g_xi / w;
    if (!g_raw) return y;

    // ξ = (x − x_k)/w, s = h/w.
    const double g_xk = -g_xi / w;
    const double g_w = -g_xi * xi / w - g_s * s / w;
    const double g_h = g_y * y_h + g_s / w;
    const double g_yk = g_y;

    const int kk = bins;
    thread_local std::vector<double> gw, gh;
    gw.assign(static_cast<std::size_t>(kk), 0.0);
    gh.assign(static_cast<std::size_t>(kk), 0.0);
    for (int i = 0; i < k; ++i) {
      gw[static_cast<std::size_t>(i)] += g_xk;
      gh[static_cast<std::size_t>(i)] += g_yk;
    }
    gw[ks] += g_w;
    gh[ks] += g_h;
    double dotw = 0.0, doth = 0.0;
    for (int i = 0; i < kk; ++i) {
      dotw += pw[static_cast<std::size_t>(i)] * gw[static_cast<std::size_t>(i)];
      doth += ph[static_cast<std::size_t>(i)] * gh[static_cast<std::size_t>(i)];
    }
    for (int i = 0; i < kk; ++i) {
      g_raw[i] += scale * pw[static_cast<std::size_t>(i)] * (gw[static_cast<std::size_t>(i)] - dotw);
      g_raw[kk + i] += scale * ph[static_cast<std::size_t>(i)] * (gh[static_cast<std::size_t>(i)] - doth);
    }
    const double g_d0 = g_y * y_d0 + g_ld * l_d0;
    const double g_d1 = g_y * y_d1 + g_ld * l_d1;
    if (k >= 1) g_raw[2 * kk + k - 1] += g_d0 * ddelta[ks];
    if (k + 1 <= kk - 1) g_raw[2 * kk + k] += g_d1 * ddelta[ks + 1];
    return y;
  }

  double inverse(double y, double* logdet) const {
    if (!inside(y)) {
      *logdet = 0.0;
      return y;
    }
    const int k = locate(yk, bins, y);
    const auto ks = static_cast<std::size_t>(k);
    const double w = width[ks];
    const double h = height[ks];
    const double s = h / w;
    const double d0 = delta[ks];
    const double d1 = delta[ks + 1];
    const double c = d1 + d0 - 2.0 * s;
    const double dy = y - yk[ks];
    const double qa = h * (s - d0) + dy * c;
    const double qb = h * d0 - dy * c;
    const double qc = -s * dy;
    const double disc = std::max(qb * qb - 4.0 * qa * qc, 0.0);
    double xi = 2.0 * qc / (-qb - std::sqrt(disc));
    xi = std::clamp(xi, 0.0, 1.0);
    const double xi1 = xi * (1.0 - xi);
    const double den = s + c * xi1;
    const double q = d1 * xi * xi + 2.0 * s * xi1 + d0 * (1.0 - xi) * (1.0 - xi);
    *logdet = -(2.0 * std::log(s) + std::log(q) - 2.0 * std::log(den));
    return xk[ks] + xi * w;
  }
};

struct LayerView {
  Eigen::Map<const Matrix> w1;
  Eigen::Map<const Vector> b1;
  Eigen::Map<const Matrix> w2;
  Eigen::Map<const Vector> b2;
};

LayerView layer_view(const FlowArchitecture& a, const double* base) {
  const Index h = a.hidden;
  const Index in = a.conditioner_inputs();
  const Index out = a.conditioner_outputs();
  const double* p = base;
  LayerView v{Eigen::Map<const Matrix>(p, h, in), Eigen::Map<const Vector>(p + h * in, h),
              Eigen::Map<const Matrix>(p + h * in + h, out, h),
              Eigen::Map<const Vector>(p + h * in + h + out * h, out)};
  return v;
}

// Conditioner input block: identity half of z stacked on the condition.
Matrix conditioner_input(const FlowArchitecture& a, const Matrix& z, const Matrix& cond) {
  const Index n = z.cols();
  Matrix in(a.conditioner_inputs(), n);
  if (a.identity_dim() > 0) in.topRows(a.identity_dim()) = z.topRows(a.identity_dim());
  if (a.condition_dim > 0) in.bottomRows(a.condition_dim) = cond;
  return in;
}

Matrix hidden_activations(const LayerView& v, const Matrix& in) {
  Matrix pre(v.b1.size(), in.cols());
  if (in.rows() > 0) {
    pre.noalias() = v.w1 * in;
    pre.colwise() += v.b1;
  } else {
    pre = v.b1.replicate(1, in.cols());
  }
  // tanh via the vectorised exponential.
  return (1.0 - 2.0 / ((2.0 * pre.array()).exp() + 1.0)).matrix();
}

Matrix raw_outputs(const LayerView& v, const Matrix& hid) {
  Matrix raw(v.b2.size(), hid.cols());
  raw.noalias() = v.w2 * hid;
  raw.colwise() += v.b2;
  return raw;
}

void reverse_rows(Matrix& m) { m = m.colwise().reverse().eval(); }

// Softmax probabilities, interior slopes and their raw derivatives for every
// transformed coordinate of every column, computed with packet math.
struct KnotCache {
  Matrix pw, ph;       // K·d_tr × n
  Matrix delta, ddelta;  // (K − 1)·d_tr × n

  void compute(const FlowArchitecture& a, const Matrix& raw) {
    const Index k = a.bins;
    const Index d_tr = a.transformed_dim();
    const Index r = raw_per_coordinate(a.bins);
    const Index n = raw.cols();
    pw.resize(k * d_tr, n);
    ph.resize(k * d_tr, n);
    delta.resize((k - 1) * d_tr, n);
    ddelta.resize((k - 1) * d_tr, n);
    for (Index i = 0; i < d_tr; ++i) {
      softmax_block(raw.middleRows(i * r, k), pw.middleRows(i * k, k));
      softmax_block(raw.middleRows(i * r + k, k), ph.middleRows(i * k, k));
      const Eigen::ArrayXXd u = raw.middleRows(i * r + 2 * k, k - 1).array() + kShift;
      const Eigen::ArrayXXd e = (-u.abs()).exp();
      // softplus(u) = max(u, 0) + log(1 + e^{-|u|}); sigmoid from the same exponential.
      const Eigen::ArrayXXd sp = u.max(0.0) + (1.0 + e).log();
      const Eigen::ArrayXXd sg = (u >= 0.0).select(1.0 / (1.0 + e), e / (1.0 + e));
      delta.middleRows(i * (k - 1), k - 1).array() = a.min_derivative + (1.0 - a.min_derivative) * sp;
      ddelta.middleRows(i * (k - 1), k - 1).array() = (1.0 - a.min_derivative) * sg;
    }
  }

  template <typename In, typename Out>
  static void softmax_block(const In& u, Out out) {
    const Eigen::RowVectorXd m = u.colwise().maxCoeff();
    out = (u.rowwise() - m).array().exp().matrix();
    const Eigen::RowVectorXd sum = out.colwise().sum();
    out.array().rowwise() /= sum.array();
  }

  void load(Spline& sp, const FlowArchitecture& a, Index c, Index i) const {
    const Index k = a.bins;
    sp.from_cache(pw.col(c).data() + i * k, ph.col(c).data() + i * k,
                  delta.col(c).data() + i * (k - 1), ddelta.col(c).data() + i * (k - 1), a.bins, a.bound,
                  a.min_bin);
  }
};

void check_shapes(const FlowParams& p, const Matrix& x_cols, const Matrix& c_cols) {
  const auto& a = p.arch();
  if (p.values().size() != a.param_count()) throw Error("flow: parameter vector has the wrong size");
  if (x_cols.rows() != a.target_dim) {
    throw Error("flow: target dimension " + std::to_string(x_cols.rows()) + " does not match " +
                std::to_string(a.target_dim));
  }
  if (a.condition_dim > 0 && (c_cols.rows() != a.condition_dim || c_cols.cols() != x_cols.cols())) {
    throw Error("flow: condition dimension mismatch");
  }
}

// Transposed inputs: one sample per column.
Matrix condition_columns(const FlowArchitecture& a, const Matrix& conditions, Index n) {
  if (a.condition_dim == 0) return Matrix(0, n);
  return conditions.transpose();
}

struct ForwardTape {
  std::vector<Matrix> inputs;  // z entering each layer
  std::vector<Matrix> hidden;
  std::vector<KnotCache> knots;
};

// Density direction: data → base. Returns base points; adds log|det| to logdet.
Matrix run_forward(const FlowParams& p, Matrix z, const Matrix& cond, Vector& logdet,
                   ForwardTape* tape) {
  const auto& a = p.arch();
  const Index n = z.cols();
  const Index d_id = a.identity_dim();
  const Index d_tr = a.transformed_dim();
  Spline sp;
  if (tape) {
    tape->inputs.resize(static_cast<std::size_t>(a.layers));
    tape->hidden.resize(static_cast<std::size_t>(a.layers));
    tape->knots.resize(static_cast<std::size_t>(a.layers));
  }
  for (int l = 0; l < a.layers; ++l) {
    const LayerView v = layer_view(a, p.values().data() + l * a.layer_param_count());
    const Matrix in = conditioner_input(a, z, cond);
    Matrix hid = hidden_activations(v, in);
    KnotCache local;
    KnotCache& kc = tape ? tape->knots[static_cast<std::size_t>(l)] : local;
    kc.compute(a, raw_outputs(v, hid));
    if (tape) tape->inputs[static_cast<std::size_t>(l)] = z;
    for (Index c = 0; c < n; ++c) {
      for (Index i = 0; i < d_tr; ++i) {
        double& x = z(d_id + i, c);
        if (x < -a.bound || x > a.bound) continue;
        kc.load(sp, a, c, i);
        double ld = 0.0;
        x = sp.forward(x, &ld);
        logdet[c] += ld;
      }
    }
    if (tape) tape->hidden[static_cast<std::size_t>(l)] = std::move(hid);
    reverse_rows(z);
  }
  return z;
}

// Sampling direction: base → data.
Matrix run_inverse(const FlowParams& p, Matrix z, const Matrix& cond, Vector& logdet) {
  const auto& a = p.arch();
  const Index n = z.cols();
  const Index d_id = a.identity_dim();
  const Index d_tr = a.transformed_dim();
  Spline sp;
  for (int l = a.layers - 1; l >= 0; --l) {
    reverse_rows(z);
    const LayerView v = layer_view(a, p.values().data() + l * a.layer_param_count());
    const Matrix in = conditioner_input(a, z, cond);
    KnotCache kc;
    kc.compute(a, raw_outputs(v, hidden_activations(v, in)));
    for (Index c = 0; c < n; ++c) {
      for (Index i = 0; i < d_tr; ++i) {
        double& y = z(d_id + i, c);
        if (y < -a.bound || y > a.bound) continue;
        kc.load(sp, a, c, i);
        double ld = 0.0;
        y = sp.inverse(y, &ld);
        logdet[c] += ld;
      }
    }
  }
  return z;
}

Vector base_logpdf(const Matrix& z) {
  const double norm = -0.5 * static_cast<double>(z.rows()) * kLog2Pi;
  return (norm - 0.5 * z.colwise().squaredNorm().array()).matrix().transpose();
}

}  // namespace

// ---------------------------------------------------------------------------

void RqsKnots::validate() const {
  const int k = bins();
  if (k < 1) throw Error("rqs: at least one bin required");
  if (heights.size() != k || derivatives.size() != k - 1) throw Error("rqs: knot arrays have inconsistent sizes");
  if (!(bound > 0.0)) throw Error("rqs: bound must be positive");
  if (!(widths.minCoeff() > 0.0) || !(heights.minCoeff() > 0.0)) {
    throw Error("rqs: bin widths and heights must be positive");
  }
  if (k > 1 && !(derivatives.minCoeff() > 0.0)) throw Error("rqs: derivatives must be positive");
  const double span = 2.0 * bound;
  if (std::abs(widths.sum() - span) > 1e-9 * span || std::abs(heights.sum() - span) > 1e-9 * span) {
    throw Error("rqs: widths and heights must each sum to the interval length");
  }
}

RqsKnots RqsKnots::identity(int bins, double bound) {
  RqsKnots k;
  k.bound = bound;
  k.widths = Vector::Constant(bins, 2.0 * bound / bins);
  k.heights = k.widths;
  k.derivatives = Vector::Ones(std::max(bins - 1, 0));
  return k;
}

SplineResult rqs_forward(double x, const RqsKnots& knots) {
  knots.validate();
  Spline sp;
  sp.from_knots(knots);
  SplineResult r;
  r.value = sp.forward(x, &r.logdet);
  return r;
}

SplineResult rqs_inverse(double y, const RqsKnots& knots) {
  knots.validate();
  Spline sp;
  sp.from_knots(knots);
  SplineResult r;
  r.value = sp.inverse(y, &r.logdet);
  return r;
}

RqsKnots knots_from_raw(const double* raw, int bins, double bound, double min_bin,
                        double min_derivative) {
  Spline sp;
  sp.from_raw(raw, bins, bound, min_bin, min_derivative);
  RqsKnots k;
  k.bound = bound;
  k.widths = Eigen::Map<const Vector>(sp.width.data(), bins);
  k.heights = Eigen::Map<const Vector>(sp.height.data(), bins);
  k.derivatives.resize(bins - 1);
  for (int j = 1; j < bins; ++j) k.derivatives[j - 1] = sp.delta[static_cast<std::size_t>(j)];
  return k;
}

// ---------------------------------------------------------------------------

void FlowArchitecture::validate() const {
  if (target_dim < 1) throw Error("flow: target dimension must be positive");
  if (condition_dim < 0) throw Error("flow: condition dimension must be nonnegative");
  if (layers < 1 || hidden < 1) throw Error("flow: layers and hidden width must be positive");
  if (bins < 1) throw Error("flow: at least one bin required");
  if (!(bound > 0.0)) throw Error("flow: spline bound must be positive");
  if (!(min_bin >= 0.0 && min_bin * bins < 1.0)) throw Error("flow: min_bin too large for the bin count");
  if (!(min_derivative >= 0.0 && min_derivative < 1.0)) throw Error("flow: min_derivative must lie in [0, 1)");
}

Index FlowArchitecture::layer_param_count() const {
  const Index h = hidden;
  return h * conditioner_inputs() + h + conditioner_outputs() * h + conditioner_outputs();
}

FlowParams::FlowParams(FlowArchitecture arch, Vector values)
    : arch_(arch), values_(std::move(values)) {
  arch_.validate();
  if (values_.size() != arch_.param_count()) throw Error("flow: parameter vector has the wrong size");
}

FlowParams FlowParams::identity(const FlowArchitecture& arch, Rng& rng) {
  arch.validate();
  Vector v = Vector::Zero(arch.param_count());
  const Index in = arch.conditioner_inputs();
  const double limit = std::sqrt(6.0 / static_cast<double>(in + arch.hidden));
  for (int l = 0; l < arch.layers; ++l) {
    double* w1 = v.data() + l * arch.layer_param_count();
    for (Index i = 0; i < arch.hidden * in; ++i) w1[i] = limit * (2.0 * rng.uniform() - 1.0);
  }
  return FlowParams(arch, std::move(v));
}

FlowParams FlowParams::random(const FlowArchitecture& arch, Rng& rng, double scale) {
  arch.validate();
  Vector v(arch.param_count());
  for (Index i = 0; i < v.size(); ++i) v[i] = scale * rng.normal();
  return FlowParams(arch, std::move(v));
}

// ---------------------------------------------------------------------------

Vector flow_logpdf_batch(const FlowParams& params, const Matrix& targets, const Matrix& conditions) {
  const Matrix x = targets.transpose();
  const Matrix c = condition_columns(params.arch(), conditions, targets.rows());
  check_shapes(params, x, c);
  Vector logdet = Vector::Zero(x.cols());
  const Matrix z = run_forward(params, x, c, logdet, nullptr);
  return base_logpdf(z) + logdet;
}

double flow_logpdf(const FlowParams& params, const Vector& target,
                   const std::optional<Vector>& condition) {
  if (params.conditional() && !condition) throw Error("flow: conditional flow needs a condition");
  const Matrix c = condition ? Matrix(condition->transpose()) : Matrix(1, 0);
  return flow_logpdf_batch(params, target.transpose(), c)[0];
}

FlowGradient flow_logpdf_grad(const FlowParams& params, const Matrix& targets,
                              const Matrix& conditions, const Vector& coefficients,
                              bool want_params, bool want_inputs) {
  const auto& a = params.arch();
  const Matrix x = targets.transpose();
  const Matrix cond = condition_columns(a, conditions, targets.rows());
  check_shapes(params, x, cond);
  const Index n = x.cols();
  if (coefficients.size() != n) throw Error("flow: coefficient vector has the wrong size");

  ForwardTape tape;
  Vector logdet = Vector::Zero(n);
  const Matrix z = run_forward(params, x, cond, logdet, &tape);

  FlowGradient out;
  out.logpdf = base_logpdf(z) + logdet;
  if (want_params) out.params = Vector::Zero(params.values().size());
  Matrix g = -z;
  Matrix g_cond = Matrix::Zero(a.condition_dim, n);

  const Index d_id = a.identity_dim();
  const Index d_tr = a.transformed_dim();
  const int r = raw_per_coordinate(a.bins);
  Spline sp;
  Matrix g_raw(a.conditioner_outputs(), n);
  for (int l = a.layers - 1; l >= 0; --l) {
    reverse_rows(g);
    const auto ls = static_cast<std::size_t>(l);
    const Matrix& zin = tape.inputs[ls];
    const Matrix& hid = tape.hidden[ls];
    const KnotCache& kc = tape.knots[ls];
    g_raw.setZero();
    for (Index c = 0; c < n; ++c) {
      for (Index i = 0; i < d_tr; ++i) {
        const double xin = zin(d_id + i, c);
        if (xin < -a.bound || xin > a.bound) continue;  // identity: gradient passes through
        kc.load(sp, a, c, i);
        double ld = 0.0, gx = 0.0;
        sp.forward(xin, &ld, g(d_id + i, c), 1.0, &gx, g_raw.col(c).data() + i * r);
        g(d_id + i, c) = gx;
      }
    }
    const double* base = params.values().data() + l * a.layer_param_count();
    const LayerView v = layer_view(a, base);
    Matrix g_hid(a.hidden, n);
    g_hid.noalias() = v.w2.transpose() * g_raw;
    g_hid.array() *= 1.0 - hid.array().square();
    if (a.conditioner_inputs() > 0) {
      Matrix g_in(a.conditioner_inputs(), n);
      g_in.noalias() = v.w1.transpose() * g_hid;
      if (d_id > 0) g.topRows(d_id) += g_in.topRows(d_id);
      if (a.condition_dim > 0) g_cond += g_in.bottomRows(a.condition_dim);
    }
    if (want_params) {
      const Index h = a.hidden;
      const Index in = a.conditioner_inputs();
      const Index outs = a.conditioner_outputs();
      double* gp = out.params.data() + l * a.layer_param_count();
      // Input gradients are done with these; weight them in place.
      g_raw *= coefficients.asDiagonal();
      g_hid *= coefficients.asDiagonal();
      if (in > 0) {
        const Matrix in_cols = conditioner_input(a, zin, cond);
        Eigen::Map<Matrix>(gp, h, in).noalias() += g_hid * in_cols.transpose();
      }
      Eigen::Map<Vector>(gp + h * in, h) += g_hid.rowwise().sum();
      Eigen::Map<Matrix>(gp + h * in + h, outs, h).noalias() += g_raw * hid.transpose();
      Eigen::Map<Vector>(gp + h * in + h + outs * h, outs) += g_raw.rowwise().sum();
    }
  }
  if (want_inputs) {
    out.targets = g.transpose();
    out.conditions = g_cond.transpose();
  }
  return out;
}

Vector flow_logpdf_grad_condition(const FlowParams& params, const Vector& target,
                                  const std::optional<Vector>& condition) {
  if (params.conditional() && !condition) throw Error("flow: conditional flow needs a condition");
  const Matrix c = condition ? Matrix(condition->transpose()) : Matrix(1, 0);
  const FlowGradient g = flow_logpdf_grad(params, target.transpose(), c, Vector::Ones(1), false, true);
  if (params.conditional()) return g.conditions.row(0).transpose();
  return g.targets.row(0).transpose();
}

Matrix flow_to_base(const FlowParams& params, const Matrix& targets, const Matrix& conditions,
                    Vector* logdet) {
  const Matrix x = targets.transpose();
  const Matrix c = condition_columns(params.arch(), conditions, targets.rows());
  check_shapes(params, x, c);
  Vector ld = Vector::Zero(x.cols());
  Matrix z = run_forward(params, x, c, ld, nullptr);
  if (logdet) *logdet = ld;
  return z.transpose();
}

Matrix flow_from_base(const FlowParams& params, const Matrix& base, const Matrix& conditions,
                      Vector* logdet) {
  const Matrix z = base.transpose();
  const Matrix c = condition_columns(params.arch(), conditions, base.rows());
  check_shapes(params, z, c);
  Vector ld = Vector::Zero(z.cols());
  Matrix x = run_inverse(params, z, c, ld);
  if (logdet) *logdet = ld;
  return x.transpose();
}

Matrix flow_sample_rows(const FlowParams& params, const Matrix& conditions, Rng& rng) {
  const Index n = conditions.rows();
  Matrix base(n, params.arch().target_dim);
  for (Index i = 0; i < n; ++i)
    for (Index k = 0; k < base.cols(); ++k) base(i, k) = rng.normal();
  return flow_from_base(params, base, conditions, nullptr);
}

Matrix flow_sample(const FlowParams& params, const std::optional<Vector>& condition, Index count,
                   Rng& rng) {
  if (count < 0) throw Error("flow: negative sample count");
  if (params.conditional()) {
    if (!condition) throw Error("flow: conditional flow needs a condition");
    if (condition->size() != params.arch().condition_dim) throw Error("flow: condition dimension mismatch");
    return flow_sample_rows(params, condition->transpose().replicate(count, 1), rng);
  }
  return flow_sample_rows(params, Matrix(count, 0), rng);
}

// ---------------------------------------------------------------------------

BoundTransform::BoundTransform(std::vector<Component> components)
    : components_(std::move(components)) {
  for (const auto& c : components_) {
    if (c.kind == Kind::Logit && !(c.upper > c.lower)) throw Error("bounds: empty interval");
    if (c.kind != Kind::Identity && !std::isfinite(c.lower)) throw Error("bounds: lower bound must be finite");
  }
}

BoundTransform BoundTransform::identity(Index dim) {
  return BoundTransform(std::vector<Component>(static_cast<std::size_t>(dim)));
}

BoundTransform BoundTransform::from_prior(const models::Prior& prior) {
  std::vector<Component> comps;
  for (const auto& p : prior.components()) {
    const double lo = p.lower();
    const double hi = p.upper();
    if (std::isfinite(lo) && std::isfinite(hi)) {
      comps.push_back({Kind::Logit, lo, hi});
    } else if (std::isfinite(lo)) {
      comps.push_back({Kind::Log, lo, 0.0});
    } else if (std::isfinite(hi)) {
      throw Error("bounds: upper-bounded-only support is not supported");
    } else {
      comps.push_back({});
    }
  }
  return BoundTransform(std::move(comps));
}

Vector BoundTransform::apply(const Vector& theta, double* log_jacobian) const {
  if (theta.size() != dim()) throw Error("bounds: dimension mismatch");
  Vector z(dim());
  double lj = 0.0;
  for (Index i = 0; i < dim(); ++i) {
    const auto& c = components_[static_cast<std::size_t>(i)];
    const double t = theta[i];
    switch (c.kind) {
      case Kind::Identity:
        z[i] = t;
        break;
      case Kind::Logit:
        if (!(t > c.lower && t < c.upper)) {
          throw Error("bounds: theta[" + std::to_string(i) + "] = " + std::to_string(t) +
                      " is not strictly inside (" + std::to_string(c.lower) + ", " +
                      std::to_string(c.upper) + ")");
        }
        z[i] = std::log(t - c.lower) - std::log(c.upper - t);
        lj += std::log(c.upper - c.lower) - std::log(t - c.lower) - std::log(c.upper - t);
        break;
      case Kind::Log:
        if (!(t > c.lower)) {
          throw Error("bounds: theta[" + std::to_string(i) + "] = " + std::to_string(t) +
                      " is not above " + std::to_string(c.lower));
        }
        z[i] = std::log(t - c.lower);
        lj -= std::log(t - c.lower);
        break;
    }
  }
  if (log_jacobian) *log_jacobian = lj;
  return z;
}

Vector BoundTransform::invert(const Vector& z) const {
  if (z.size() != dim()) throw Error("bounds: dimension mismatch");
  Vector t(dim());
  for (Index i = 0; i < dim(); ++i) {
    const auto& c = components_[static_cast<std::size_t>(i)];
    switch (c.kind) {
      case Kind::Identity:
        t[i] = z[i];
        break;
      case Kind::Logit:
        t[i] = c.lower + (c.upper - c.lower) * sigmoid(z[i]);
        break;
      case Kind::Log:
        t[i] = c.lower + std::exp(z[i]);
        break;
    }
  }
  return t;
}

double BoundTransform::log_jacobian(const Vector& theta) const {
  double lj = 0.0;
  apply(theta, &lj);
  return lj;
}

Matrix BoundTransform::apply_rows(const Matrix& thetas) const {
  Matrix out(thetas.rows(), thetas.cols());
  for (Index i = 0; i < thetas.rows(); ++i) out.row(i) = apply(thetas.row(i).transpose()).transpose();
  return out;
}

Matrix BoundTransform::invert_rows(const Matrix& z) const {
  Matrix out(z.rows(), z.cols());
  for (Index i = 0; i < z.rows(); ++i) out.row(i) = invert(z.row(i).transpose()).transpose();
  return out;
}

Vector bound_transform_apply(const BoundTransform& bt, const Vector& theta, double* log_jacobian) {
  return bt.apply(theta, log_jacobian);
}

Vector bound_transform_invert(const BoundTransform& bt, const Vector& z) { return bt.invert(z); }

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw Error("train: learning_rate must be positive");
  if (batch_size < 1) throw Error("train: batch_size must be positive");
  if (patience < 1) throw Error("train: patience must be positive");
  if (max_epochs < 0) throw Error("train: max_epochs must be nonnegative");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw Error("train: validation_fraction must lie in [0, 1)");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw Error("train: Adam decay rates must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw Error("train: adam_eps must be positive");
}

double weighted_nll(const FlowParams& params, const Matrix& targets, const Matrix& conditions,
                    const Vector& weights) {
  const Index n = targets.rows();
  if (weights.size() != n) throw Error("flow: weight vector has the wrong size");
  constexpr Index kChunk = 4096;
  double num = 0.0;
  double den = 0.0;
  for (Index start = 0; start < n; start += kChunk) {
    const Index len = std::min(kChunk, n - start);
    const Matrix c = params.conditional() ? Matrix(conditions.middleRows(start, len)) : Matrix(len, 0);
    const Vector lp = flow_logpdf_batch(params, targets.middleRows(start, len), c);
    num -= weights.segment(start, len).dot(lp);
    den += weights.segment(start, len).sum();
  }
  return num / den;
}

TrainResult train_flow(const Matrix& targets, const Matrix& conditions, const Vector& weights,
                       const FlowArchitecture& arch_template, const TrainConfig& config, Rng& rng) {
  config.validate();
  const Index n_all = targets.rows();
  const bool conditional = conditions.cols() > 0;
  if (weights.size() != n_all) throw Error("train: weight vector has the wrong size");
  if (conditional && conditions.rows() != n_all) throw Error("train: condition rows mismatch");
  if (!targets.allFinite() || (conditional && !conditions.allFinite())) {
    throw Error("train: non-finite training data");
  }
  if (!weights.allFinite() || weights.minCoeff() < 0.0) throw Error("train: invalid weights");

  FlowArchitecture arch = arch_template;
  arch.target_dim = targets.cols();
  arch.condition_dim = conditions.cols();
  arch.validate();

  std::vector<Index> rows;
  for (Index i = 0; i < n_all; ++i) {
    if (weights[i] > 0.0) rows.push_back(i);
  }
  if (rows.empty()) throw Error("train: no rows with positive weight");

  Rng split_rng = rng.split("split");
  for (std::size_t i = rows.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(split_rng.uniform_index(i));
    std::swap(rows[i - 1], rows[j]);
  }
  auto n_val = static_cast<Index>(std::llround(config.validation_fraction * static_cast<double>(rows.size())));
  if (static_cast<Index>(rows.size()) - n_val < 1) n_val = 0;
  std::vector<Index> val_rows(rows.begin(), rows.begin() + n_val);
  std::vector<Index> train_rows(rows.begin() + n_val, rows.end());
  std::sort(val_rows.begin(), val_rows.end());
  std::sort(train_rows.begin(), train_rows.end());

  auto gather = [&](const std::vector<Index>& idx, Matrix& x, Matrix& c, Vector& w) {
    const auto m = static_cast<Index>(idx.size());
    x.resize(m, arch.target_dim);
    c.resize(m, arch.condition_dim);
    w.resize(m);
    for (Index i = 0; i < m; ++i) {
      const Index r = idx[static_cast<std::size_t>(i)];
      x.row(i) = targets.row(r);
      if (conditional) c.row(i) = conditions.row(r);
      w[i] = weights[r];
    }
  };
  Matrix x_tr, c_tr, x_va, c_va;
  Vector w_tr, w_va;
  gather(train_rows, x_tr, c_tr, w_tr);
  gather(val_rows, x_va, c_va, w_va);
  // Without a held-out set, the training loss drives early stopping.
  const Matrix& x_score = n_val > 0 ? x_va : x_tr;
  const Matrix& c_score = n_val > 0 ? c_va : c_tr;
  const Vector& w_score = n_val > 0 ? w_va : w_tr;

  Rng init_rng = rng.split("init");
  FlowParams params = FlowParams::identity(arch, init_rng);
  TrainResult result;
  result.train_rows = static_cast<Index>(train_rows.size());
  result.validation_rows = n_val;
  result.initial_train_nll = weighted_nll(params, x_tr, c_tr, w_tr);
  double best = weighted_nll(params, x_score, c_score, w_score);
  result.validation_history.push_back(best);
  FlowParams best_params = params;

  const Index p = params.values().size();
  Vector m1 = Vector::Zero(p);
  Vector m2 = Vector::Zero(p);
  double b1t = 1.0, b2t = 1.0;
  const Index n_tr = x_tr.rows();
  std::vector<Index> order(static_cast<std::size_t>(n_tr));
  std::iota(order.begin(), order.end(), Index{0});
  Rng shuffle_rng = rng.split("shuffle");
  Matrix xb, cb;
  Vector wb;
  int stale = 0;
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(shuffle_rng.uniform_index(i));
      std::swap(order[i - 1], order[j]);
    }
    int batch_no = 0;
    for (Index start = 0; start < n_tr; start += config.batch_size, ++batch_no) {
      const Index len = std::min(config.batch_size, n_tr - start);
      xb.resize(len, arch.target_dim);
      cb.resize(len, arch.condition_dim);
      wb.resize(len);
      for (Index i = 0; i < len; ++i) {
        const Index r = order[static_cast<std::size_t>(start + i)];
        xb.row(i) = x_tr.row(r);
        if (conditional) cb.row(i) = c_tr.row(r);
        wb[i] = w_tr[r];
      }
      const Vector coef = wb / wb.sum();
      const FlowGradient g = flow_logpdf_grad(params, xb, cb, coef, true, false);
      const double loss = -coef.dot(g.logpdf);
      if (!std::isfinite(loss) || !g.params.allFinite()) {
        throw Error("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                    std::to_string(batch_no));
      }
      // Descent on the negative log-likelihood.
      b1t *= config.beta1;
      b2t *= config.beta2;
      const double step = config.learning_rate * std::sqrt(1.0 - b2t) / (1.0 - b1t);
      for (Index k = 0; k < p; ++k) {
        const double grad = -g.params[k];
        m1[k] = config.beta1 * m1[k] + (1.0 - config.beta1) * grad;
        m2[k] = config.beta2 * m2[k] + (1.0 - config.beta2) * grad * grad;
        params.values()[k] -= step * m1[k] / (std::sqrt(m2[k]) + config.adam_eps * std::sqrt(1.0 - b2t));
      }
    }
    result.epochs = epoch;
    const double score = weighted_nll(params, x_score, c_score, w_score);
    if (!std::isfinite(score)) {
      throw Error("train: non-finite validation loss at epoch " + std::to_string(epoch));
    }
    result.validation_history.push_back(score);
    if (score < best) {
      best = score;
      best_params = params;
      result.best_epoch = epoch;
      stale = 0;
    } else if (++stale >= config.patience) {
      break;
    }
  }
  result.best_validation_nll = best;
  result.params = std::move(best_params);
  result.final_train_nll = weighted_nll(result.params, x_tr, c_tr, w_tr);
  return result;
}

TrainResult train_flow(const SimDataset& dataset, bool conditional, const FlowArchitecture& arch,
                       const TrainConfig& config, Rng& rng) {
  dataset.validate();
  const Vector w = dataset.normalised_weights();
  if (conditional) return train_flow(dataset.thetas, dataset.summaries, w, arch, config, rng);
  return train_flow(dataset.summaries, Matrix(dataset.size(), 0), w, arch, config, rng);
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json vec_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector json_vec(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}

nlohmann::json standardiser_json(const Standardiser& s) {
  return {{"mean", vec_json(s.mean)}, {"sd", vec_json(s.sd)}};
}

Standardiser json_standardiser(const nlohmann::json& j) {
  Standardiser s;
  s.mean = json_vec(j.at("mean"));
  s.sd = json_vec(j.at("sd"));
  if (s.mean.size() != s.sd.size()) throw Error("flow bundle: standardiser sizes differ");
  return s;
}

const char* kind_name(BoundTransform::Kind k) {
  switch (k) {
    case BoundTransform::Kind::Logit:
      return "logit";
    case BoundTransform::Kind::Log:
      return "log";
    case BoundTransform::Kind::Identity:
      break;
  }
  return "identity";
}

}  // namespace

nlohmann::json to_json(const FlowBundle& bundle) {
  const auto& a = bundle.flow.arch();
  nlohmann::json j;
  j["format"] = "prnpe-flow";
  j["version"] = 1;
  j["architecture"] = {{"target_dim", a.target_dim},   {"condition_dim", a.condition_dim},
                       {"layers", a.layers},           {"hidden", a.hidden},
                       {"bins", a.bins},               {"bound", a.bound},
                       {"min_bin", a.min_bin},         {"min_derivative", a.min_derivative},
                       {"activation", "tanh"},         {"permutation", "reverse"}};
  j["values"] = vec_json(bundle.flow.values());
  j["target_standardiser"] = standardiser_json(bundle.target_standardiser);
  if (bundle.condition_standardiser) {
    j["condition_standardiser"] = standardiser_json(*bundle.condition_standardiser);
  } else {
    j["condition_standardiser"] = nullptr;
  }
  nlohmann::json bounds = nlohmann::json::array();
  for (const auto& c : bundle.bounds.components()) {
    bounds.push_back({{"kind", kind_name(c.kind)}, {"lower", c.lower}, {"upper", c.upper}});
  }
  j["bounds"] = bounds;
  return j;
}

FlowBundle flow_bundle_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "prnpe-flow") throw Error("flow bundle: unknown format");
    if (j.at("version").get<int>() != 1) throw Error("flow bundle: unsupported version");
    const auto& ja = j.at("architecture");
    FlowArchitecture a;
    a.target_dim = ja.at("target_dim").get<Index>();
    a.condition_dim = ja.at("condition_dim").get<Index>();
    a.layers = ja.at("layers").get<int>();
    a.hidden = ja.at("hidden").get<int>();
    a.bins = ja.at("bins").get<int>();
    a.bound = ja.at("bound").get<double>();
    a.min_bin = ja.at("min_bin").get<double>();
    a.min_derivative = ja.at("min_derivative").get<double>();
    FlowBundle b;
    b.flow = FlowParams(a, json_vec(j.at("values")));
    b.target_standardiser = json_standardiser(j.at("target_standardiser"));
    if (!j.at("condition_standardiser").is_null()) {
      b.condition_standardiser = json_standardiser(j.at("condition_standardiser"));
    }
    std::vector<BoundTransform::Component> comps;
    for (const auto& c : j.at("bounds")) {
      const std::string kind = c.at("kind").get<std::string>();
      BoundTransform::Component comp;
      comp.lower = c.at("lower").get<double>();
      comp.upper = c.at("upper").get<double>();
      if (kind == "logit") {
        comp.kind = BoundTransform::Kind::Logit;
      } else if (kind == "log") {
        comp.kind = BoundTransform::Kind::Log;
      } else if (kind != "identity") {
        throw Error("flow bundle: unknown bound kind '" + kind + "'");
      }
      comps.push_back(comp);
    }
    b.bounds = BoundTransform(std::move(comps));
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("flow bundle: ") + e.what());
  }
}

void save_flow_bundle(const FlowBundle& bundle, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("flow bundle: cannot write " + path);
  out << to_json(bundle).dump() << '\n';
  if (!out) throw Error("flow bundle: write failed for " + path);
}

FlowBundle load_flow_bundle(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("flow bundle: cannot read " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("flow bundle: malformed JSON in " + path + ": " + e.what());
  }
  return flow_bundle_from_json(j);
}

}  // namespace prnpe::flow
