#include "ovseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ovseg/distill.hpp"
#include "ovseg/image.hpp"
#include "ovseg/rng.hpp"
#include "ovseg/toydata.hpp"
#include "ovseg/upsampler.hpp"

namespace ovseg {

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

bool GradCheckReport::passed() const {
  for (const auto& e : entries)
    if (!(e.max_rel_error < tolerance)) return false;
  return !entries.empty();
}

std::string GradCheckReport::text() const {
  std::ostringstream os;
  os.precision(3);
  for (const auto& e : entries) {
    os << (e.max_rel_error < tolerance ? "ok   " : "FAIL ") << e.group << ' ' << e.name << "  n=" << e.checked
       << "  max_rel=" << std::scientific << e.max_rel_error << "  (analytic " << e.analytic << ", numeric "
       << e.numeric << ")" << std::defaultfloat << '\n';
  }
  os << (passed() ? "PASS" : "FAIL") << "  max relative error " << std::scientific << max_rel_error() << " (tolerance "
     << tolerance << ")\n";
  return os.str();
}

void GradCheckReport::append(const GradCheckReport& other) {
  entries.insert(entries.end(), other.entries.begin(), other.entries.end());
  tolerance = other.tolerance;
}

double gradcheck_relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(numeric) + 1e-8);
}

GradCheckReport check_gradients(const std::string& group, const ParamSet& params,
                                const std::function<Tensor()>& loss, const GradCheckConfig& config) {
  std::vector<Tensor> tensors = params.tensors();
  std::vector<bool> saved(tensors.size());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    saved[i] = tensors[i].requires_grad();
    tensors[i].set_requires_grad(true);
    tensors[i].zero_grad();
  }
  {
    Tape tape;
    tape.backward(loss());
  }

  GradCheckReport report;
  report.tolerance = config.tolerance;
  Rng rng(Rng::derive(config.seed, group));
  for (const auto& [name, tensor] : params) {
    Tensor p = tensor;
    const Tensor g = p.grad_tensor();
    const std::vector<double> analytic(g.data().begin(), g.data().end());
    std::vector<std::size_t> idx(p.numel());
    std::iota(idx.begin(), idx.end(), 0);
    if (idx.size() > config.samples) {
      for (std::size_t i = 0; i < config.samples; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
      idx.resize(config.samples);
      std::sort(idx.begin(), idx.end());
    }
    GradCheckEntry entry{group, name, idx.size(), 0.0, 0.0, 0.0};
    for (std::size_t i : idx) {
      auto data = p.mutable_data();
      const double orig = data[i];
      double plus = 0.0, minus = 0.0;
      {
        NoGradGuard guard;
        data[i] = orig + config.step;
        plus = loss().item();
        data[i] = orig - config.step;
        minus = loss().item();
      }
      data[i] = orig;
      const double numeric = (plus - minus) / (2.0 * config.step);
      const double err = gradcheck_relative_error(analytic[i], numeric);
      if (err >= entry.max_rel_error) {
        entry.max_rel_error = err;
        entry.analytic = analytic[i];
        entry.numeric = numeric;
      }
    }
    report.entries.push_back(entry);
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    tensors[i].zero_grad();
    tensors[i].set_requires_grad(saved[i]);
  }
  return report;
}

EncoderConfig micro_encoder_config() {
  EncoderConfig c;
  c.image_size = 32;
  c.patch_size = 16;
  c.depth = 2;
  c.embed_dim = 16;
  c.num_heads = 2;
  c.proj_dim = 8;
  return c;
}

GradCheckReport run_gradcheck_suite(const GradCheckConfig& config) {
  const EncoderConfig cfg = micro_encoder_config();
  const EncoderWeights teacher = EncoderWeights::synthesize(cfg, config.seed);
  GradCheckReport report;
  report.tolerance = config.tolerance;

  // Upsampler objective on one scene.
  {
    const Tensor image = raster_to_tensor(make_toy_scene(cfg.image_size, cfg.image_size, config.seed).image);
    Tensor lowres;
    {
      NoGradGuard guard;
      const Encoding enc = encode(image, teacher, cfg);
      lowres = tokens_to_map(enc.o_prime, enc.out.h, enc.out.w).clone();
    }
    const std::size_t steps = upsample_steps_for(cfg);
    const UpsamplerParams up = UpsamplerParams::init(cfg.proj_dim, steps, config.seed);
    const auto loss = [&] { return total_loss(image, lowres, up, 0.1, steps).total; };
    const ParamSet all = up.params();
    for (const char* group : {"jbu", "crn", "down"}) {
      ParamSet ps;
      for (const auto& [name, t] : all.with_prefix(std::string(group) + "."))
        if (name != "jbu.radius") ps.add(name, t);
      report.append(check_gradients(group, ps, loss, config));
    }
  }

  // Combined distillation objective on two pairs with a 2x2 region grid.
  {
    std::vector<DistillPair> pairs;
    for (std::size_t i = 0; i < 2; ++i) {
      const Raster opt = make_toy_scene(cfg.image_size, cfg.image_size, config.seed + 10 + i).image;
      pairs.push_back({raster_to_tensor(opt), raster_to_tensor(make_toy_sar(opt, config.seed + 20 + i)), i});
    }
    std::vector<TeacherFeatures> feats;
    for (const auto& p : pairs) feats.push_back(teacher_features(p.optical, teacher, cfg));
    const EncoderWeights student = EncoderWeights::synthesize(cfg, config.seed + 1);
    DistillConfig dc;
    dc.k = 2;
    Tensor log_tau = Tensor::scalar(std::log(dc.tau_init));
    const std::vector<std::size_t> batch = {0, 1};
    const auto loss = [&] { return distill_loss(pairs, feats, batch, student, cfg, log_tau, dc).total; };
    ParamSet ps = student_trainable(student, "student.");
    ps.add("tau.log", log_tau);
    report.append(check_gradients("student", ps, loss, config));
  }
  return report;
}

}  // namespace ovseg
