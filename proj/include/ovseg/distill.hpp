#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ovseg/encoder.hpp"
#include "ovseg/params.hpp"
#include "ovseg/tensor.hpp"

namespace ovseg {

struct DistillPair {
  Tensor optical;  // [3 x S x S] in [-1, 1]
  Tensor sar;      // [3 x S x S], single channel replicated
  std::size_t id = 0;
};

struct DistillConfig {
  double tau_init = 0.07;
  std::size_t k = 7;
  double w_contrast = 1.0;
  double w_cls = 1.0;
  double w_local = 1.0;
  std::size_t steps = 100;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::size_t batch = 16;
  std::uint64_t seed = 0;
  double tau_min = 1e-3;
  double tau_max = 1.0;

  void validate() const;
};

// Symmetric InfoNCE over the N x N cosine / tau matrix.
// `log_tau` is a one-element tensor so tau can be learned.
Tensor loss_cls_contrast(const Tensor& opt_cls, const Tensor& sar_cls, const Tensor& log_tau);
Tensor loss_cls_contrast(const Tensor& opt_cls, const Tensor& sar_cls, double tau);

// 1 - cos(opt, sar) for [c] or [1 x c] inputs.
Tensor loss_cls_distill(const Tensor& opt_cls, const Tensor& sar_cls);

// Row indices of each of the K x K tiles of an h x w grid, tile-major. The
// last tile along each axis absorbs the remainder.
std::vector<std::vector<std::size_t>> region_tiles(std::size_t h, std::size_t w, std::size_t k);
Tensor region_mean_pool(const Tensor& local, std::size_t h, std::size_t w, std::size_t k);

// Mean over regions of 1 - cos between paired region means.
Tensor loss_local_distill(const Tensor& opt_local, const Tensor& sar_local, std::size_t h, std::size_t w,
                          std::size_t k);

// Teacher outputs for one optical image, computed once and reused.
struct TeacherFeatures {
  Tensor cls;    // [1 x c]
  Tensor local;  // [h*w x c]
  std::size_t h = 0, w = 0;
};

// Training-time forward (standard final block) of the frozen teacher.
TeacherFeatures teacher_features(const Tensor& optical, const EncoderWeights& teacher, const EncoderConfig& cfg);

struct DistillLoss {
  Tensor contrast, cls, local, total;
};

// Combined loss for the pairs selected by `indices`, differentiable w.r.t.
// the student weights and log_tau.
DistillLoss distill_loss(const std::vector<DistillPair>& pairs, const std::vector<TeacherFeatures>& teacher,
                         const std::vector<std::size_t>& indices, const EncoderWeights& student,
                         const EncoderConfig& cfg, const Tensor& log_tau, const DistillConfig& dc);

// Student tensors updated by distillation. Attention key biases are held at
// their initial values: the training forward softmaxes q.k over keys, which
// cancels a key bias, so its gradient is identically zero.
ParamSet student_trainable(const EncoderWeights& student, std::string_view prefix = {});

struct DistillRecord {
  std::size_t step = 0;
  double contrast = 0.0, cls = 0.0, local = 0.0, total = 0.0, tau = 0.0;
};

struct DistillResult {
  EncoderWeights student;
  double tau = 0.0;
  std::vector<DistillRecord> curve;
};

// Adam on the student (initialized as a copy of the teacher) and log tau.
// The teacher is never written; ContractError if its weights change.
DistillResult distill(const std::vector<DistillPair>& pairs, const EncoderWeights& teacher, const EncoderConfig& cfg,
                      const DistillConfig& dc);

// `step,contrast,cls,local,total,tau`
std::string distill_curve_csv(const std::vector<DistillRecord>& curve);

// Rows of a `opt_path,sar_path` manifest; an optional header row is skipped.
struct ManifestRow {
  std::string opt_path;
  std::string sar_path;
  std::size_t line = 0;
};
std::vector<ManifestRow> parse_manifest(const std::string& text);

}  // namespace ovseg
