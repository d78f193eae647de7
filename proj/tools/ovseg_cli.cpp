#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <optional>

#include "ovseg/commands.hpp"
#include "ovseg/errors.hpp"

namespace {

using ovseg::CommandContext;

struct Flags {
  std::string config;
  std::string workdir = ".";
  std::vector<std::string> sets;
  std::map<std::string, std::string> direct;  // config key -> flag value
};

// Adds `--name` writing into the config key `key`.
void bind(CLI::App* sub, Flags& flags, const std::string& name, const std::string& key, const std::string& help) {
  sub->add_option_function<std::string>(
      "--" + name, [&flags, key](const std::string& v) { flags.direct[key] = v; }, help + " (" + key + ")");
}

CommandContext build_context(const Flags& flags) {
  CommandContext ctx;
  ctx.workdir = flags.workdir;
  ctx.log = &std::cout;
  if (!flags.config.empty()) ctx.config = ovseg::RunConfig::load(ctx.resolve(flags.config).string());
  for (const auto& s : flags.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ovseg::ConfigError("--set expects key=value, got '" + s + "'");
    ctx.config.set(s.substr(0, eq), s.substr(eq + 1));
  }
  for (const auto& [k, v] : flags.direct) ctx.config.set(k, v);
  return ctx;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-vocabulary segmentation toolkit: feature upsampler training, SAR distillation, inference and evaluation"};
  app.footer(ovseg::config_help());
  app.require_subcommand(1);

  Flags flags;
  using Command = int (*)(const CommandContext&);
  std::vector<std::pair<CLI::App*, Command>> commands;

  auto add = [&](const std::string& name, const std::string& desc, Command fn) {
    CLI::App* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", flags.config, "plain-text `key = value` config file");
    sub->add_option("--workdir", flags.workdir, "base directory for every relative path")->capture_default_str();
    sub->add_option("--set", flags.sets, "override any config key, key=value (repeatable)");
    bind(sub, flags, "seed", "seed", "random seed");
    bind(sub, flags, "output", "paths.output", "output path");
    bind(sub, flags, "encoder", "paths.encoder", "encoder weights");
    sub->footer(ovseg::config_help());
    commands.emplace_back(sub, fn);
    return sub;
  };

  auto* train = add("train-upsampler", "train the shared JBU upsampler, CRN and downsamplers", ovseg::cmd_train_upsampler);
  bind(train, flags, "corpus", "paths.corpus", "image directory");
  bind(train, flags, "steps", "train.steps", "optimizer steps");
  bind(train, flags, "gamma", "train.gamma", "image loss weight");
  bind(train, flags, "lr", "train.lr", "learning rate");

  auto* dist = add("distill", "distill a SAR student from the frozen optical encoder", ovseg::cmd_distill);
  bind(dist, flags, "manifest", "paths.manifest", "pair manifest");
  bind(dist, flags, "steps", "distill.steps", "optimizer steps");
  bind(dist, flags, "k", "distill.k", "regions per side");
  bind(dist, flags, "lr", "distill.lr", "learning rate");

  auto* seg = add("segment", "segment one image against a vocabulary", ovseg::cmd_segment);
  bind(seg, flags, "image", "paths.image", "input image");
  bind(seg, flags, "vocab", "paths.vocab", "vocabulary file");
  bind(seg, flags, "embeddings", "paths.vocab_embeddings", "synonym embeddings");
  bind(seg, flags, "upsampler", "paths.upsampler", "upsampler weights");
  bind(seg, flags, "lambda", "infer.lambda", "bias alleviation intensity");
  bind(seg, flags, "color", "paths.color_output", "color rendering");

  auto* ev = add("eval", "per-class IoU and mIoU of predicted masks", ovseg::cmd_eval);
  bind(ev, flags, "pred", "paths.pred_dir", "predicted masks");
  bind(ev, flags, "gt", "paths.gt_dir", "ground-truth masks");
  bind(ev, flags, "vocab", "paths.vocab", "class names");

  add("gradcheck", "finite-difference check of every trainable parameter group", ovseg::cmd_gradcheck);
  add("gen-toy-data", "write the synthetic corpora, pair manifest and planted toy", ovseg::cmd_gen_toy_data);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    for (const auto& [sub, fn] : commands)
      if (sub->parsed()) return fn(build_context(flags));
  } catch (const ovseg::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ovseg::InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ovseg::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ovseg::DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
