#include "ovseg/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ovseg/optim.hpp"
#include "ovseg/params.hpp"
#include "ovseg/rng.hpp"

namespace ovseg {
namespace {

Tensor as_row(const Tensor& t) {
  if (t.rank() == 1) return ops::reshape(t, {1, t.numel()});
  if (t.rank() == 2 && t.dim(0) == 1) return t;
  throw DimensionError("expected a [c] or [1 x c] vector, got " + shape_str(t.shape()));
}

// 1 - cos per row pair, averaged.
Tensor mean_cosine_distance(const Tensor& a, const Tensor& b) {
  return ops::add_scalar(ops::neg(ops::mean(ops::row_cosine(a, b))), 1.0);
}

EncoderConfig training_config(EncoderConfig cfg) {
  cfg.surgery_enabled = false;
  return cfg;
}

}  // namespace

void DistillConfig::validate() const {
  if (!(tau_min > 0.0 && tau_min <= tau_max)) throw ConfigError("distill: need 0 < tau_min <= tau_max");
  if (!(tau_init >= tau_min && tau_init <= tau_max)) throw ConfigError("distill.tau_init outside the clamp range");
  if (k == 0) throw ConfigError("distill.k must be positive");
  if (batch == 0) throw ConfigError("distill.batch must be positive");
  if (!(lr > 0.0)) throw ConfigError("distill.lr must be positive");
  for (double w : {w_contrast, w_cls, w_local})
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("distill loss weights must be finite and >= 0");
}

Tensor loss_cls_contrast(const Tensor& opt_cls, const Tensor& sar_cls, const Tensor& log_tau) {
  if (opt_cls.rank() != 2 || opt_cls.shape() != sar_cls.shape()) {
    throw DimensionError("loss_cls_contrast: both inputs must be [N x c] with the same shape");
  }
  const std::size_t n = opt_cls.dim(0);
  if (n == 0) throw DimensionError("loss_cls_contrast: empty batch");
  const Tensor sim = ops::matmul(ops::normalize_rows(opt_cls), ops::transpose(ops::normalize_rows(sar_cls)));
  const Tensor logits = ops::scale_by(sim, ops::exp(ops::neg(log_tau)));
  std::vector<double> eye(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
  const Tensor diag({n, n}, std::move(eye));
  const Tensor rows = ops::sum(ops::mul(ops::log_softmax(logits, 1), diag));
  const Tensor cols = ops::sum(ops::mul(ops::log_softmax(logits, 0), diag));
  return ops::scale(ops::add(rows, cols), -1.0 / static_cast<double>(n));
}

Tensor loss_cls_contrast(const Tensor& opt_cls, const Tensor& sar_cls, double tau) {
  if (!(tau > 0.0)) throw ContractError("loss_cls_contrast: tau must be positive");
  return loss_cls_contrast(opt_cls, sar_cls, Tensor::scalar(std::log(tau)));
}

Tensor loss_cls_distill(const Tensor& opt_cls, const Tensor& sar_cls) {
  const Tensor a = as_row(opt_cls), b = as_row(sar_cls);
  if (a.shape() != b.shape()) throw DimensionError("loss_cls_distill: width mismatch");
  return mean_cosine_distance(a, b);
}

std::vector<std::vector<std::size_t>> region_tiles(std::size_t h, std::size_t w, std::size_t k) {
  if (k == 0) throw ConfigError("region count K must be positive");
  if (h < k || w < k) {
    throw DimensionError("region pooling: grid " + std::to_string(h) + "x" + std::to_string(w) +
                         " is smaller than K=" + std::to_string(k));
  }
  const std::size_t th = h / k, tw = w / k;
  std::vector<std::vector<std::size_t>> tiles(k * k);
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t ty = std::min(y / th, k - 1);
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t tx = std::min(x / tw, k - 1);
      tiles[ty * k + tx].push_back(y * w + x);
    }
  }
  return tiles;
}

Tensor region_mean_pool(const Tensor& local, std::size_t h, std::size_t w, std::size_t k) {
  if (local.rank() != 2 || local.dim(0) != h * w) throw DimensionError("region_mean_pool: local must be [h*w x c]");
  return ops::pool_rows(local, region_tiles(h, w, k));
}

Tensor loss_local_distill(const Tensor& opt_local, const Tensor& sar_local, std::size_t h, std::size_t w,
                          std::size_t k) {
  if (opt_local.shape() != sar_local.shape()) throw DimensionError("loss_local_distill: feature maps differ in shape");
  return mean_cosine_distance(region_mean_pool(opt_local, h, w, k), region_mean_pool(sar_local, h, w, k));
}

TeacherFeatures teacher_features(const Tensor& optical, const EncoderWeights& teacher, const EncoderConfig& cfg) {
  NoGradGuard guard;
  const Encoding enc = encode(optical, teacher, training_config(cfg));
  return {enc.out.cls().clone(), enc.out.patches().clone(), enc.out.h, enc.out.w};
}

DistillLoss distill_loss(const std::vector<DistillPair>& pairs, const std::vector<TeacherFeatures>& teacher,
                         const std::vector<std::size_t>& indices, const EncoderWeights& student,
                         const EncoderConfig& cfg, const Tensor& log_tau, const DistillConfig& dc) {
  if (indices.empty()) throw DimensionError("distill: empty batch");
  const EncoderConfig train_cfg = training_config(cfg);
  std::vector<Tensor> opt_cls, sar_cls;
  Tensor cls_sum, local_sum;
  for (std::size_t i : indices) {
    const Encoding enc = encode(pairs.at(i).sar, student, train_cfg);
    const TeacherFeatures& t = teacher.at(i);
    opt_cls.push_back(t.cls);
    sar_cls.push_back(enc.out.cls());
    const Tensor c = loss_cls_distill(t.cls, enc.out.cls());
    const Tensor l = loss_local_distill(t.local, enc.out.patches(), t.h, t.w, dc.k);
    cls_sum = cls_sum.rank() == 0 ? c : ops::add(cls_sum, c);
    local_sum = local_sum.rank() == 0 ? l : ops::add(local_sum, l);
  }
  const double inv_n = 1.0 / static_cast<double>(indices.size());
  DistillLoss out;
  out.contrast = loss_cls_contrast(ops::concat_rows(opt_cls), ops::concat_rows(sar_cls), log_tau);
  out.cls = ops::scale(cls_sum, inv_n);
  out.local = ops::scale(local_sum, inv_n);
  out.total = ops::add(ops::add(ops::scale(out.contrast, dc.w_contrast), ops::scale(out.cls, dc.w_cls)),
                       ops::scale(out.local, dc.w_local));
  return out;
}

ParamSet student_trainable(const EncoderWeights& student, std::string_view prefix) {
  ParamSet out;
  for (const auto& [name, t] : student.params(prefix)) {
    if (name.size() >= 8 && name.compare(name.size() - 8, 8, ".attn.bk") == 0) continue;
    out.add(name, t);
  }
  return out;
}

DistillResult distill(const std::vector<DistillPair>& pairs, const EncoderWeights& teacher, const EncoderConfig& cfg,
                      const DistillConfig& dc) {
  dc.validate();
  cfg.validate();
  teacher.check(cfg);
  if (pairs.empty()) throw InputError("distill: no training pairs");
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j)
      if (pairs[i].id == pairs[j].id) throw InputError("distill: duplicate pair id " + std::to_string(pairs[i].id));
    if (pairs[i].optical.shape() != pairs[i].sar.shape()) {
      throw DimensionError("distill: pair " + std::to_string(pairs[i].id) + " has mismatched image sizes");
    }
  }
  const auto teacher_bytes = encode_ovw1(teacher.params());

  std::vector<TeacherFeatures> feats;
  feats.reserve(pairs.size());
  for (const auto& p : pairs) feats.push_back(teacher_features(p.optical, teacher, cfg));

  DistillResult result;
  result.student = teacher.clone();
  Tensor log_tau = Tensor::scalar(std::log(dc.tau_init));
  std::vector<Tensor> trainable = student_trainable(result.student).tensors();
  trainable.push_back(log_tau);
  Adam adam(trainable, {dc.lr, dc.beta1, dc.beta2, 1e-8, 0.0});

  // Pairs sorted by id so accumulation order is fixed.
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pairs[a].id < pairs[b].id; });

  Rng rng(Rng::derive(dc.seed, "distill"));
  for (std::size_t step = 1; step <= dc.steps; ++step) {
    std::vector<std::size_t> batch = order;
    if (dc.batch < batch.size()) {
      for (std::size_t i = 0; i < dc.batch; ++i) std::swap(batch[i], batch[i + rng.below(batch.size() - i)]);
      batch.resize(dc.batch);
      std::sort(batch.begin(), batch.end(), [&](std::size_t a, std::size_t b) { return pairs[a].id < pairs[b].id; });
    }
    adam.zero_grad();
    DistillRecord rec;
    {
      Tape tape;
      const DistillLoss loss = distill_loss(pairs, feats, batch, result.student, cfg, log_tau, dc);
      tape.backward(loss.total);
      rec = {step, loss.contrast.item(), loss.cls.item(), loss.local.item(), loss.total.item(),
             std::exp(log_tau.item())};
    }
    adam.step();
    auto lt = log_tau.mutable_data();
    lt[0] = std::clamp(lt[0], std::log(dc.tau_min), std::log(dc.tau_max));
    result.curve.push_back(rec);
  }
  if (encode_ovw1(teacher.params()) != teacher_bytes) throw ContractError("distill: teacher weights were modified");
  result.tau = std::exp(log_tau.item());
  return result;
}

std::string distill_curve_csv(const std::vector<DistillRecord>& curve) {
  std::ostringstream os;
  os.precision(17);
  os << "step,contrast,cls,local,total,tau\n";
  for (const auto& r : curve)
    os << r.step << ',' << r.contrast << ',' << r.cls << ',' << r.local << ',' << r.total << ',' << r.tau << '\n';
  return os.str();
}

std::vector<ManifestRow> parse_manifest(const std::string& text) {
  std::vector<ManifestRow> rows;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos || line[0] == '#') continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos || line.find(',', comma + 1) != std::string::npos) {
      throw InputError("manifest line " + std::to_string(lineno) + ": expected `opt_path,sar_path`");
    }
    auto field = [](std::string f) {
      const auto a = f.find_first_not_of(" \t");
      if (a == std::string::npos) return std::string();
      return f.substr(a, f.find_last_not_of(" \t") - a + 1);
    };
    ManifestRow row{field(line.substr(0, comma)), field(line.substr(comma + 1)), lineno};
    if (rows.empty() && row.opt_path == "opt_path" && row.sar_path == "sar_path") continue;
    if (row.opt_path.empty() || row.sar_path.empty()) {
      throw InputError("manifest line " + std::to_string(lineno) + ": empty path");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw InputError("manifest has no rows");
  return rows;
}

}  // namespace ovseg
