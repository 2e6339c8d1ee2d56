#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rvox/volume.hpp"

namespace rvox::loss {

struct LossWeights {
  double lambda = 10.0;  // weight of the reconstruction term
};

struct LossReport {
  double l1 = 0;     // mean absolute error y vs g
  double l2 = 0;     // mean squared error y vs g
  double adv_d = 0;  // discriminator objective (to be maximized)
  double adv_g = 0;  // generator adversarial term (per mode)
  double joint = 0;  // adv_g + lambda * selected reconstruction loss
};

// "minimax" is the adversarial objective as written; "nonsaturating" is the
// -log D(fake) surrogate with the same fixed points. Default nonsaturating.
enum class AdvMode { NonSaturating, Minimax };

AdvMode adv_mode_from_string(const std::string& s);
std::string to_string(AdvMode mode);

// Patch/voxel probabilities are clamped to [kLogEps, 1-kLogEps] before logs.
inline constexpr double kLogEps = 1e-7;

double l1_loss(std::span<const float> y, std::span<const float> g);
double l1_loss(std::span<const double> y, std::span<const double> g);
double l1_loss(const Volume& y, const Volume& g);

double l2_loss(std::span<const float> y, std::span<const float> g);
double l2_loss(std::span<const double> y, std::span<const double> g);
double l2_loss(const Volume& y, const Volume& g);

double adv_loss_d(std::span<const float> d_real, std::span<const float> d_fake);
double adv_loss_d(std::span<const double> d_real, std::span<const double> d_fake);

double adv_loss_g(std::span<const float> d_fake, AdvMode mode);
double adv_loss_g(std::span<const double> d_fake, AdvMode mode);

double joint_generator_objective(double l1, double adv_g, const LossWeights& w);

// 2|P.G| / (|P|+|G|) on binary masks; both empty -> 1.
double dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

// Per-class dice for classes 1..num_classes-1 (0 is background). A class
// absent from both volumes scores 1.
std::vector<double> per_class_dice(std::span<const std::int32_t> pred,
                                   std::span<const std::int32_t> gt,
                                   int num_classes);
double mean_dice(std::span<const std::int32_t> pred,
                 std::span<const std::int32_t> gt, int num_classes);

struct PairedTResult {
  double t = 0;
  int df = 0;
  double p = 1;
};

// Two-sided paired t-test on equal-length samples; p-value via the
// regularized incomplete beta function.
PairedTResult paired_t_test_full(std::span<const double> a,
                                 std::span<const double> b);
double paired_t_test(std::span<const double> a, std::span<const double> b);

}  // namespace rvox::loss
