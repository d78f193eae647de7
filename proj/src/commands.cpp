#include "ovseg/commands.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "ovseg/gradcheck.hpp"
#include "ovseg/params.hpp"
#include "ovseg/rng.hpp"
#include "ovseg/toydata.hpp"

namespace fs = std::filesystem;

namespace ovseg {
namespace {

void write_text(const fs::path& path, const std::string& text) {
  write_file_bytes(path.string(), std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text(const fs::path& path) {
  const auto bytes = read_file_bytes(path.string());
  return std::string(bytes.begin(), bytes.end());
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

fs::path loss_csv_path(const CommandContext& ctx, const fs::path& output) {
  const std::string& p = ctx.config.get("paths.loss_csv");
  if (!p.empty()) return ctx.resolve(p);
  fs::path out = output;
  out.replace_filename(output.stem().string() + "_loss.csv");
  return out;
}

std::vector<fs::path> list_files(const fs::path& dir, const std::string& ext) {
  if (!fs::is_directory(dir)) throw InputError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

std::ostream& log_of(const CommandContext& ctx) {
  static std::ostringstream sink;
  sink.str({});
  return ctx.log ? *ctx.log : sink;
}

ClassVocabulary load_vocab(const CommandContext& ctx, std::size_t dim) {
  const std::string& vp = ctx.config.get("paths.vocab");
  if (vp.empty()) throw ConfigError("paths.vocab is required");
  auto groups = ClassVocabulary::parse_groups(read_text(ctx.resolve(vp)));
  const std::string& ep = ctx.config.get("paths.vocab_embeddings");
  if (ep.empty()) return ClassVocabulary::synthesize(std::move(groups), dim, run_seed(ctx.config));
  return ClassVocabulary::from_ovw1(std::move(groups), load_ovw1(ctx.resolve(ep).string()));
}

Tensor load_pair_image(const fs::path& path, std::size_t size, const ManifestRow& row) {
  Raster r;
  try {
    r = load_raster(path.string());
  } catch (const InputError& e) {
    throw InputError("manifest line " + std::to_string(row.line) + ": " + e.what());
  }
  if (r.width != size || r.height != size) {
    throw InputError("manifest line " + std::to_string(row.line) + ": " + path.string() + " is " +
                     std::to_string(r.width) + "x" + std::to_string(r.height) + ", expected " + std::to_string(size) +
                     "x" + std::to_string(size));
  }
  return raster_to_tensor(r);
}

std::string two_digits(std::size_t i) { return (i < 10 ? "0" : "") + std::to_string(i); }

}  // namespace

fs::path CommandContext::resolve(const std::string& path) const {
  const fs::path p(path);
  return p.is_absolute() ? p : workdir / p;
}

fs::path CommandContext::output_or(const std::string& fallback) const {
  const std::string& p = config.get("paths.output");
  return resolve(p.empty() ? fallback : p);
}

EncoderWeights load_encoder(const CommandContext& ctx, const EncoderConfig& cfg) {
  const std::string& p = ctx.config.get("paths.encoder");
  if (p.empty()) return EncoderWeights::synthesize(cfg, run_seed(ctx.config));
  const ParamSet ps = load_ovw1(ctx.resolve(p).string());
  const bool student = !ps.contains("patch_embed.w") && ps.contains("student.patch_embed.w");
  return EncoderWeights::from_params(ps, cfg, student ? "student." : "");
}

int cmd_train_upsampler(const CommandContext& ctx) {
  const RunConfig& rc = ctx.config;
  const EncoderConfig cfg = encoder_config(rc);
  const UpsamplerTrainConfig train = upsampler_train_config(rc);
  const auto files = list_files(ctx.resolve(rc.get("paths.corpus")), ".ppm");
  if (files.empty()) throw InputError("no .ppm images in " + ctx.resolve(rc.get("paths.corpus")).string());
  std::vector<Tensor> corpus;
  for (const auto& f : files) corpus.push_back(raster_to_tensor(load_raster(f.string())));

  const EncoderWeights encoder = load_encoder(ctx, cfg);
  const UpsamplerParams init =
      UpsamplerParams::init(cfg.proj_dim, upsample_steps_for(cfg), run_seed(rc), rc.get_size("jbu.radius"),
                            rc.get_real("jbu.tau_spatial_init"), rc.get_real("jbu.tau_range_init"));
  const UpsamplerTrainResult result = train_upsampler(corpus, encoder, cfg, init, train);

  const fs::path out = ctx.output_or("upsampler.ovw");
  const fs::path csv = loss_csv_path(ctx, out);
  ensure_parent(out);
  ensure_parent(csv);
  save_ovw1(out.string(), result.params.params());
  write_text(csv, upsampler_curve_csv(result.curve));
  if (!result.curve.empty()) {
    log_of(ctx) << "train-upsampler: " << corpus.size() << " images, " << result.curve.size()
                << " steps, total " << result.curve.front().total << " -> " << result.curve.back().total << "\n"
                << "wrote " << out.string() << " and " << csv.string() << "\n";
  }
  return 0;
}

int cmd_distill(const CommandContext& ctx) {
  const RunConfig& rc = ctx.config;
  const EncoderConfig cfg = encoder_config(rc);
  const DistillConfig dc = distill_config(rc);
  const fs::path manifest = ctx.resolve(rc.get("paths.manifest"));
  const auto rows = parse_manifest(read_text(manifest));
  const fs::path base = manifest.parent_path();
  std::vector<DistillPair> pairs;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto at = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
    pairs.push_back({load_pair_image(at(rows[i].opt_path), cfg.image_size, rows[i]),
                     load_pair_image(at(rows[i].sar_path), cfg.image_size, rows[i]), i});
  }
  const EncoderWeights teacher = load_encoder(ctx, cfg);
  const DistillResult result = distill(pairs, teacher, cfg, dc);

  const fs::path out = ctx.output_or("student.ovw");
  const fs::path csv = loss_csv_path(ctx, out);
  ensure_parent(out);
  ensure_parent(csv);
  save_ovw1(out.string(), result.student.params("student."));
  write_text(csv, distill_curve_csv(result.curve));
  if (!result.curve.empty()) {
    log_of(ctx) << "distill: " << pairs.size() << " pairs, " << result.curve.size() << " steps, total "
                << result.curve.front().total << " -> " << result.curve.back().total << ", tau " << result.tau << "\n"
                << "wrote " << out.string() << " and " << csv.string() << "\n";
  }
  return 0;
}

int cmd_segment(const CommandContext& ctx) {
  const RunConfig& rc = ctx.config;
  SegmentationModel model;
  model.cfg = encoder_config(rc);
  model.encoder = load_encoder(ctx, model.cfg);
  const std::string& up = rc.get("paths.upsampler");
  model.jbu = up.empty() ? JbuParams::init(run_seed(rc), rc.get_size("jbu.radius"), 32,
                                           rc.get_real("jbu.tau_spatial_init"), rc.get_real("jbu.tau_range_init"))
                         : UpsamplerParams::from_params(load_ovw1(ctx.resolve(up).string())).jbu;
  model.vocab = load_vocab(ctx, model.cfg.proj_dim);
  model.bias = bias_config(rc);
  model.validate();
  const SlideConfig slide = slide_config(rc);

  const std::string& image_path = rc.get("paths.image");
  if (image_path.empty()) throw ConfigError("paths.image is required");
  const Raster resized = resize_long_side(load_raster(ctx.resolve(image_path).string()), rc.get_size("infer.long_side"));
  const SlideResult result = slide_inference(raster_to_tensor(resized), model, slide);
  const SegmentationMask mask = predict_mask(result);

  const fs::path out = ctx.output_or("mask.pgm");
  ensure_parent(out);
  save_mask(out.string(), mask);
  const std::string& color = rc.get("paths.color_output");
  if (!color.empty()) {
    ensure_parent(ctx.resolve(color));
    save_raster(ctx.resolve(color).string(), colorize_mask(mask));
  }
  std::vector<std::size_t> counts(model.vocab.num_groups(), 0);
  for (auto l : mask.labels) ++counts[l];
  auto& log = log_of(ctx);
  log << "segment: " << mask.width << "x" << mask.height << ", " << result.windows << " windows\n";
  for (std::size_t g = 0; g < counts.size(); ++g) log << "  " << model.vocab.groups()[g].name << ": " << counts[g] << "\n";
  log << "wrote " << out.string() << "\n";
  return 0;
}

int cmd_eval(const CommandContext& ctx) {
  const RunConfig& rc = ctx.config;
  if (rc.get("paths.pred_dir").empty() || rc.get("paths.gt_dir").empty()) {
    throw ConfigError("paths.pred_dir and paths.gt_dir are required");
  }
  const auto preds = list_files(ctx.resolve(rc.get("paths.pred_dir")), ".pgm");
  const auto gts = list_files(ctx.resolve(rc.get("paths.gt_dir")), ".pgm");
  if (preds.empty() || gts.empty()) throw InputError("eval: no .pgm masks found");
  std::map<std::string, fs::path> pred_by_stem, gt_by_stem;
  for (const auto& p : preds) pred_by_stem[p.stem().string()] = p;
  for (const auto& g : gts) gt_by_stem[g.stem().string()] = g;
  std::vector<std::string> unmatched;
  for (const auto& [s, _] : pred_by_stem)
    if (!gt_by_stem.count(s)) unmatched.push_back(s + " (prediction only)");
  for (const auto& [s, _] : gt_by_stem)
    if (!pred_by_stem.count(s)) unmatched.push_back(s + " (ground truth only)");
  if (!unmatched.empty()) {
    std::string msg = "eval: unmatched stems:";
    for (const auto& u : unmatched) msg += " " + u;
    throw InputError(msg);
  }

  std::vector<std::pair<SegmentationMask, SegmentationMask>> masks;
  std::size_t max_label = 0;
  for (const auto& [s, p] : pred_by_stem) {
    masks.emplace_back(load_mask(p.string()), load_mask(gt_by_stem[s].string()));
    for (auto l : masks.back().first.labels) max_label = std::max<std::size_t>(max_label, l);
    for (auto l : masks.back().second.labels)
      if (l != kIgnoreLabel) max_label = std::max<std::size_t>(max_label, l);
  }
  std::vector<std::string> names;
  std::size_t n = max_label + 1;
  if (!rc.get("paths.vocab").empty()) {
    for (const auto& g : ClassVocabulary::parse_groups(read_text(ctx.resolve(rc.get("paths.vocab"))))) names.push_back(g.name);
    n = names.size();
  }
  ConfusionMatrix cm(n);
  for (const auto& [pred, gt] : masks) cm.merge(confusion(pred, gt, n));
  const std::string csv = iou_csv(miou(cm), names);
  const fs::path out = ctx.output_or("eval.csv");
  ensure_parent(out);
  write_text(out, csv);
  log_of(ctx) << csv;
  return 0;
}

int cmd_gradcheck(const CommandContext& ctx) {
  const RunConfig& rc = ctx.config;
  GradCheckConfig gc;
  gc.step = rc.get_real("gradcheck.step");
  gc.tolerance = rc.get_real("gradcheck.tolerance");
  gc.samples = rc.get_size("gradcheck.samples");
  gc.seed = run_seed(rc);
  const GradCheckReport report = run_gradcheck_suite(gc);
  const std::string text = report.text();
  log_of(ctx) << text;
  if (!rc.get("paths.output").empty()) {
    ensure_parent(ctx.output_or(""));
    write_text(ctx.output_or(""), text);
  }
  return report.passed() ? 0 : 1;
}

int cmd_gen_toy_data(const CommandContext& ctx) {
  const RunConfig& rc = ctx.config;
  const std::uint64_t seed = run_seed(rc);
  const fs::path root = ctx.output_or("toy");
  for (const char* d : {"corpus", "pairs", "scenes/images", "scenes/masks", "planted"}) fs::create_directories(root / d);

  const std::size_t corpus_n = rc.get_size("toy.corpus_images"), corpus_size = rc.get_size("toy.corpus_size");
  for (std::size_t i = 0; i < corpus_n; ++i) {
    const ToyScene s = make_toy_scene(corpus_size, corpus_size, Rng::derive(seed, "corpus") + i);
    save_raster((root / "corpus" / ("img_" + two_digits(i) + ".ppm")).string(), s.image);
  }

  const std::size_t pairs_n = rc.get_size("toy.pairs"), pair_size = rc.get_size("toy.pair_size");
  std::string manifest = "opt_path,sar_path\n";
  for (std::size_t i = 0; i < pairs_n; ++i) {
    const ToyScene s = make_toy_scene(pair_size, pair_size, Rng::derive(seed, "pairs") + i);
    const Raster sar = make_toy_sar(s.image, Rng::derive(seed, "sar") + i);
    const std::string opt_name = "opt_" + two_digits(i) + ".ppm", sar_name = "sar_" + two_digits(i) + ".pgm";
    save_raster((root / "pairs" / opt_name).string(), s.image);
    save_raster((root / "pairs" / sar_name).string(), sar);
    manifest += opt_name + "," + sar_name + "\n";
  }
  write_text(root / "pairs" / "manifest.csv", manifest);

  const std::size_t scenes_n = rc.get_size("toy.scenes"), scene_size = rc.get_size("toy.scene_size");
  for (std::size_t i = 0; i < scenes_n; ++i) {
    const ToyScene s = make_toy_scene(scene_size, scene_size, Rng::derive(seed, "scenes") + i);
    save_raster((root / "scenes/images" / ("scene_" + two_digits(i) + ".ppm")).string(), s.image);
    save_mask((root / "scenes/masks" / ("scene_" + two_digits(i) + ".pgm")).string(), s.mask);
  }
  write_text(root / "scenes" / "vocab.txt", "background = background | ground\nblob = blob | disc\n");

  const PlantedToy toy = make_planted_toy(16, 16, 16, 0.5, 0.35, seed);
  ParamSet tokens;
  tokens.add("tokens", toy.tokens.tokens);
  save_ovw1((root / "planted" / "tokens.ovw").string(), tokens);
  save_mask((root / "planted" / "mask.pgm").string(), toy.gt);
  ParamSet emb;
  for (std::size_t r = 0; r < toy.vocab.num_synonyms(); ++r) {
    emb.add(toy.vocab.groups()[toy.vocab.group_of(r)].synonyms[0], ops::slice_rows(toy.vocab.embeddings(), r, r + 1));
  }
  save_ovw1((root / "planted" / "embeddings.ovw").string(), emb);
  write_text(root / "planted" / "vocab.txt", "background = background\ntarget = target\n");

  const std::string seed_line = "seed = " + std::to_string(seed) + "\n";
  write_text(root / "upsampler.cfg",
             "# toy upsampler run: 64 px crops, desk-scale step size, no jitter views\n"
             "# (a synthesized encoder is not transform-consistent, so jittered views only add noise)\n" +
                 seed_line +
                 "encoder.image_size = 64\ntrain.lr = 0.01\ntrain.batch = 2\ntrain.jitter_views = 0\n"
                 "paths.corpus = corpus\npaths.output = upsampler.ovw\n");
  write_text(root / "distill.cfg", "# toy distillation run\n" + seed_line +
                                       "encoder.image_size = 112\npaths.manifest = pairs/manifest.csv\n"
                                       "paths.output = student.ovw\n");
  write_text(root / "segment.cfg", "# toy segmentation run\n" + seed_line +
                                       "paths.vocab = scenes/vocab.txt\npaths.image = scenes/images/scene_00.ppm\n"
                                       "paths.output = pred/scene_00.pgm\n");
  log_of(ctx) << "gen-toy-data: " << corpus_n << " corpus images, " << pairs_n << " pairs, " << scenes_n
              << " scenes, planted toy under " << root.string() << "\n";
  return 0;
}

}  // namespace ovseg
