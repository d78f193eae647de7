#include "ovseg/config.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

#include "ovseg/params.hpp"

namespace ovseg {
namespace {

const ConfigKey* find_key(std::string_view name) {
  for (const auto& k : config_schema())
    if (k.name == name) return &k;
  return nullptr;
}

std::string_view trim(std::string_view s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string_view::npos) return {};
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

void check_type(const ConfigKey& key, const std::string& value) {
  auto bad = [&] { return ConfigError("config key '" + key.name + "': cannot parse '" + value + "'"); };
  const char* first = value.data();
  const char* last = value.data() + value.size();
  switch (key.type) {
    case KeyType::kInt: {
      std::int64_t v = 0;
      const auto r = std::from_chars(first, last, v);
      if (r.ec != std::errc() || r.ptr != last) throw bad();
      break;
    }
    case KeyType::kReal: {
      double v = 0;
      const auto r = std::from_chars(first, last, v);
      if (r.ec != std::errc() || r.ptr != last || !std::isfinite(v)) throw bad();
      break;
    }
    case KeyType::kBool:
      if (value != "true" && value != "false" && value != "1" && value != "0") throw bad();
      break;
    case KeyType::kString:
      break;
  }
}

}  // namespace

const std::vector<ConfigKey>& config_schema() {
  using K = KeyType;
  static const std::vector<ConfigKey> schema = {
      {"seed", K::kInt, "0", "seed for every random stream"},
      {"encoder.image_size", K::kInt, "224", "encoder input side in pixels (window size)"},
      {"encoder.patch_size", K::kInt, "16", "patch side in pixels"},
      {"encoder.depth", K::kInt, "4", "number of transformer blocks"},
      {"encoder.embed_dim", K::kInt, "64", "token width d"},
      {"encoder.num_heads", K::kInt, "4", "attention heads"},
      {"encoder.proj_dim", K::kInt, "32", "projected feature width c"},
      {"encoder.surgery", K::kBool, "true", "self-self attention in the last block at inference"},
      {"jbu.radius", K::kInt, "5", "JBU window radius (window side 2r+1)"},
      {"jbu.tau_spatial_init", K::kReal, "2.0", "initial spatial kernel temperature"},
      {"jbu.tau_range_init", K::kReal, "1.0", "initial range kernel temperature"},
      {"train.steps", K::kInt, "200", "upsampler optimizer steps"},
      {"train.lr", K::kReal, "0.001", "upsampler Adam learning rate"},
      {"train.beta1", K::kReal, "0.9", "Adam beta1"},
      {"train.beta2", K::kReal, "0.999", "Adam beta2"},
      {"train.gamma", K::kReal, "0.1", "weight of the image reconstruction loss"},
      {"train.batch", K::kInt, "8", "crops per upsampler step"},
      {"train.jitter_views", K::kInt, "1", "random jitter views per crop besides the identity"},
      {"distill.tau_init", K::kReal, "0.07", "initial contrastive temperature"},
      {"distill.k", K::kInt, "7", "regions per side for local distillation"},
      {"distill.w_contrast", K::kReal, "1.0", "weight of the contrastive term"},
      {"distill.w_cls", K::kReal, "1.0", "weight of the class-token term"},
      {"distill.w_local", K::kReal, "1.0", "weight of the local region term"},
      {"distill.steps", K::kInt, "100", "distillation optimizer steps"},
      {"distill.lr", K::kReal, "0.001", "distillation Adam learning rate"},
      {"distill.beta1", K::kReal, "0.9", "Adam beta1"},
      {"distill.beta2", K::kReal, "0.999", "Adam beta2"},
      {"distill.batch", K::kInt, "16", "pairs per distillation step"},
      {"infer.long_side", K::kInt, "448", "resize target for the longer image side"},
      {"infer.window", K::kInt, "224", "sliding window side (must equal encoder.image_size)"},
      {"infer.stride", K::kInt, "112", "sliding window stride"},
      {"infer.lambda", K::kReal, "0.3", "global bias alleviation intensity"},
      {"gradcheck.step", K::kReal, "1e-5", "central difference step"},
      {"gradcheck.tolerance", K::kReal, "1e-4", "maximum relative error"},
      {"gradcheck.samples", K::kInt, "16", "entries checked per tensor larger than this"},
      {"toy.corpus_images", K::kInt, "10", "upsampler corpus size"},
      {"toy.corpus_size", K::kInt, "96", "upsampler corpus image side"},
      {"toy.pairs", K::kInt, "16", "optical/SAR pairs"},
      {"toy.pair_size", K::kInt, "112", "pair image side"},
      {"toy.scenes", K::kInt, "4", "labelled scenes for segment/eval"},
      {"toy.scene_size", K::kInt, "448", "labelled scene side (448 keeps masks at the inference resolution)"},
      {"paths.encoder", K::kString, "", "encoder OVW1 (teacher or student); empty = seeded synthesis"},
      {"paths.upsampler", K::kString, "", "upsampler OVW1 for segment; empty = seeded init"},
      {"paths.corpus", K::kString, "toy/corpus", "directory of *.ppm images for train-upsampler"},
      {"paths.manifest", K::kString, "toy/pairs/manifest.csv", "opt_path,sar_path manifest for distill"},
      {"paths.image", K::kString, "", "input image for segment"},
      {"paths.vocab", K::kString, "", "vocabulary file (display_name = syn1 | syn2)"},
      {"paths.vocab_embeddings", K::kString, "", "OVW1 of synonym embeddings; empty = seeded synthesis"},
      {"paths.pred_dir", K::kString, "", "predicted masks for eval"},
      {"paths.gt_dir", K::kString, "", "ground-truth masks for eval"},
      {"paths.output", K::kString, "", "output file (directory for gen-toy-data); empty = per-command default"},
      {"paths.loss_csv", K::kString, "", "loss curve CSV; empty = <output stem>_loss.csv next to the output"},
      {"paths.color_output", K::kString, "", "optional color rendering of the segment mask"},
  };
  return schema;
}

RunConfig::RunConfig() {
  for (const auto& k : config_schema()) values_[k.name] = k.default_value;
}

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig rc;
  std::size_t offset = 0, lineno = 0;
  while (offset <= text.size()) {
    auto end = text.find('\n', offset);
    if (end == std::string_view::npos) end = text.size();
    ++lineno;
    std::string_view line = text.substr(offset, end - offset);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (!line.empty()) {
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) {
        throw ConfigError("config line " + std::to_string(lineno) + ": expected `key = value`");
      }
      rc.set(std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))));
    }
    offset = end + 1;
  }
  return rc;
}

RunConfig RunConfig::load(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return parse(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const ConfigKey* k = find_key(key);
  if (k == nullptr) throw ConfigError("unknown config key '" + key + "'");
  check_type(*k, value);
  values_[key] = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

bool RunConfig::is_default(const std::string& key) const {
  const ConfigKey* k = find_key(key);
  return k != nullptr && get(key) == k->default_value;
}

std::int64_t RunConfig::get_int(const std::string& key) const {
  const std::string& v = get(key);
  std::int64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw ConfigError("config key '" + key + "' is not an integer");
  return out;
}

std::size_t RunConfig::get_size(const std::string& key) const {
  const std::int64_t v = get_int(key);
  if (v < 0) throw ConfigError("config key '" + key + "' must be non-negative");
  return static_cast<std::size_t>(v);
}

double RunConfig::get_real(const std::string& key) const {
  const std::string& v = get(key);
  double out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw ConfigError("config key '" + key + "' is not a number");
  return out;
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  return v == "true" || v == "1";
}

std::string RunConfig::dump() const {
  std::ostringstream os;
  for (const auto& k : config_schema()) os << k.name << " = " << get(k.name) << '\n';
  return os.str();
}

std::string config_help() {
  std::ostringstream os;
  os << "Config keys (`key = value`, `#` starts a comment):\n";
  for (const auto& k : config_schema()) {
    os << "  " << k.name << " = " << (k.default_value.empty() ? "\"\"" : k.default_value) << "\n      " << k.help
       << '\n';
  }
  return os.str();
}

std::uint64_t run_seed(const RunConfig& rc) { return static_cast<std::uint64_t>(rc.get_int("seed")); }

EncoderConfig encoder_config(const RunConfig& rc) {
  EncoderConfig c;
  c.image_size = rc.get_size("encoder.image_size");
  c.patch_size = rc.get_size("encoder.patch_size");
  c.depth = rc.get_size("encoder.depth");
  c.embed_dim = rc.get_size("encoder.embed_dim");
  c.num_heads = rc.get_size("encoder.num_heads");
  c.proj_dim = rc.get_size("encoder.proj_dim");
  c.surgery_enabled = rc.get_bool("encoder.surgery");
  c.validate();
  return c;
}

UpsamplerTrainConfig upsampler_train_config(const RunConfig& rc) {
  UpsamplerTrainConfig t;
  t.steps = rc.get_size("train.steps");
  t.lr = rc.get_real("train.lr");
  t.beta1 = rc.get_real("train.beta1");
  t.beta2 = rc.get_real("train.beta2");
  t.gamma = rc.get_real("train.gamma");
  t.batch = rc.get_size("train.batch");
  t.jitter_views = rc.get_size("train.jitter_views");
  t.seed = run_seed(rc);
  if (t.batch == 0) throw ConfigError("train.batch must be positive");
  if (!(t.lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (!(t.gamma >= 0.0)) throw ConfigError("train.gamma must be >= 0");
  return t;
}

DistillConfig distill_config(const RunConfig& rc) {
  DistillConfig d;
  d.tau_init = rc.get_real("distill.tau_init");
  d.k = rc.get_size("distill.k");
  d.w_contrast = rc.get_real("distill.w_contrast");
  d.w_cls = rc.get_real("distill.w_cls");
  d.w_local = rc.get_real("distill.w_local");
  d.steps = rc.get_size("distill.steps");
  d.lr = rc.get_real("distill.lr");
  d.beta1 = rc.get_real("distill.beta1");
  d.beta2 = rc.get_real("distill.beta2");
  d.batch = rc.get_size("distill.batch");
  d.seed = run_seed(rc);
  d.validate();
  return d;
}

SlideConfig slide_config(const RunConfig& rc) {
  SlideConfig s;
  s.window = rc.get_size("infer.window");
  s.stride = rc.get_size("infer.stride");
  s.validate();
  return s;
}

BiasConfig bias_config(const RunConfig& rc) {
  BiasConfig b;
  b.lambda = rc.get_real("infer.lambda");
  b.validate();
  return b;
}

}  // namespace ovseg
