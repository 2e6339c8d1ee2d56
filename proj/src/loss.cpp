#include "rvox/loss.hpp"

#include <algorithm>
#include <cmath>

#include "rvox/error.hpp"

namespace rvox::loss {

namespace {

template <typename T>
double l1_impl(std::span<const T> y, std::span<const T> g) {
  if (y.size() != g.size() || y.empty())
    throw DomainError("shape error: l1 operands differ in size");
  double sum = 0;
  for (std::size_t i = 0; i < y.size(); ++i) sum += std::abs(double(y[i]) - double(g[i]));
  return sum / double(y.size());
}

template <typename T>
double l2_impl(std::span<const T> y, std::span<const T> g) {
  if (y.size() != g.size() || y.empty())
    throw DomainError("shape error: l2 operands differ in size");
  double sum = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = double(y[i]) - double(g[i]);
    sum += d * d;
  }
  return sum / double(y.size());
}

double clamped_log(double d) {
  return std::log(std::clamp(d, kLogEps, 1.0 - kLogEps));
}

template <typename T>
double adv_d_impl(std::span<const T> d_real, std::span<const T> d_fake) {
  if (d_real.size() != d_fake.size() || d_real.empty())
    throw DomainError("shape error: discriminator maps differ in size");
  double sum_real = 0, sum_fake = 0;
  for (std::size_t i = 0; i < d_real.size(); ++i) {
    sum_real += clamped_log(double(d_real[i]));
    sum_fake += clamped_log(1.0 - double(d_fake[i]));
  }
  return sum_real / double(d_real.size()) + sum_fake / double(d_fake.size());
}

template <typename T>
double adv_g_impl(std::span<const T> d_fake, AdvMode mode) {
  if (d_fake.empty()) throw DomainError("shape error: empty discriminator map");
  double sum = 0;
  for (std::size_t i = 0; i < d_fake.size(); ++i) {
    const double d = double(d_fake[i]);
    sum += mode == AdvMode::Minimax ? clamped_log(1.0 - d) : -clamped_log(d);
  }
  return sum / double(d_fake.size());
}

// Regularized incomplete beta I_x(a, b), continued fraction per Lentz.
double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-16;
  constexpr double kFpMin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

double reg_incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) -
                          std::lgamma(b) + a * std::log(x) +
                          b * std::log(1.0 - x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

}  // namespace

AdvMode adv_mode_from_string(const std::string& s) {
  if (s == "nonsaturating") return AdvMode::NonSaturating;
  if (s == "minimax") return AdvMode::Minimax;
  throw DomainError("bad mode '" + s + "'");
}

std::string to_string(AdvMode mode) {
  return mode == AdvMode::Minimax ? "minimax" : "nonsaturating";
}

double l1_loss(std::span<const float> y, std::span<const float> g) { return l1_impl(y, g); }
double l1_loss(std::span<const double> y, std::span<const double> g) { return l1_impl(y, g); }

double l1_loss(const Volume& y, const Volume& g) {
  if (y.dims() != g.dims() || y.c != g.c)
    throw DomainError("shape error: volumes differ in shape");
  return l1_impl(std::span<const float>(y.data), std::span<const float>(g.data));
}

double l2_loss(std::span<const float> y, std::span<const float> g) { return l2_impl(y, g); }
double l2_loss(std::span<const double> y, std::span<const double> g) { return l2_impl(y, g); }

double l2_loss(const Volume& y, const Volume& g) {
  if (y.dims() != g.dims() || y.c != g.c)
    throw DomainError("shape error: volumes differ in shape");
  return l2_impl(std::span<const float>(y.data), std::span<const float>(g.data));
}

double adv_loss_d(std::span<const float> d_real, std::span<const float> d_fake) {
  return adv_d_impl(d_real, d_fake);
}
double adv_loss_d(std::span<const double> d_real, std::span<const double> d_fake) {
  return adv_d_impl(d_real, d_fake);
}

double adv_loss_g(std::span<const float> d_fake, AdvMode mode) {
  return adv_g_impl(d_fake, mode);
}
double adv_loss_g(std::span<const double> d_fake, AdvMode mode) {
  return adv_g_impl(d_fake, mode);
}

double joint_generator_objective(double l1, double adv_g, const LossWeights& w) {
  if (w.lambda < 0) throw DomainError("lambda must be >= 0");
  return adv_g + w.lambda * l1;
}

double dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size())
    throw DomainError("shape error: masks differ in size");
  std::size_t np = 0, ng = 0, inter = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    np += p;
    ng += g;
    inter += p && g;
  }
  if (np + ng == 0) return 1.0;  // both empty
  return 2.0 * double(inter) / double(np + ng);
}

std::vector<double> per_class_dice(std::span<const std::int32_t> pred,
                                   std::span<const std::int32_t> gt,
                                   int num_classes) {
  if (pred.size() != gt.size())
    throw DomainError("shape error: label volumes differ in size");
  if (num_classes < 2) throw DomainError("bad label: need >= 2 classes");
  std::vector<std::size_t> np(std::size_t(num_classes), 0);
  std::vector<std::size_t> ng(std::size_t(num_classes), 0);
  std::vector<std::size_t> inter(std::size_t(num_classes), 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const std::int32_t p = pred[i], g = gt[i];
    if (p < 0 || p >= num_classes || g < 0 || g >= num_classes)
      throw DomainError("bad label: value outside [0, num_classes)");
    ++np[std::size_t(p)];
    ++ng[std::size_t(g)];
    if (p == g) ++inter[std::size_t(p)];
  }
  std::vector<double> out;
  out.reserve(std::size_t(num_classes) - 1);
  for (int k = 1; k < num_classes; ++k) {
    const std::size_t denom = np[std::size_t(k)] + ng[std::size_t(k)];
    out.push_back(denom == 0 ? 1.0 : 2.0 * double(inter[std::size_t(k)]) / double(denom));
  }
  return out;
}

double mean_dice(std::span<const std::int32_t> pred,
                 std::span<const std::int32_t> gt, int num_classes) {
  const auto scores = per_class_dice(pred, gt, num_classes);
  double sum = 0;
  for (double s : scores) sum += s;
  return sum / double(scores.size());
}

PairedTResult paired_t_test_full(std::span<const double> a,
                                 std::span<const double> b) {
  if (a.size() != b.size())
    throw DomainError("shape error: samples differ in length");
  const std::size_t k = a.size();
  if (k < 2) throw DomainError("degenerate test: need at least 2 pairs");
  double mean = 0;
  for (std::size_t i = 0; i < k; ++i) mean += a[i] - b[i];
  mean /= double(k);
  double ss = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double d = (a[i] - b[i]) - mean;
    ss += d * d;
  }
  const double var = ss / double(k - 1);
  if (var == 0.0) throw DomainError("degenerate test: zero-variance differences");
  PairedTResult r;
  r.df = int(k) - 1;
  r.t = mean / std::sqrt(var / double(k));
  const double t2 = r.t * r.t;
  r.p = reg_incomplete_beta(0.5 * r.df, 0.5, double(r.df) / (double(r.df) + t2));
  return r;
}

double paired_t_test(std::span<const double> a, std::span<const double> b) {
  return paired_t_test_full(a, b).p;
}

}  // namespace rvox::loss
