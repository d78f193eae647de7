#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "ovseg/config.hpp"

namespace ovseg {

// Subcommand bodies shared by the command-line tool and the Python module.
// Relative paths are resolved against `workdir`; progress and reports go to
// `log`. Each returns the process exit status (0 ok, 1 check failed).
struct CommandContext {
  RunConfig config;
  std::filesystem::path workdir = ".";
  std::ostream* log = nullptr;

  std::filesystem::path resolve(const std::string& path) const;
  // paths.output, or `fallback` when that is empty.
  std::filesystem::path output_or(const std::string& fallback) const;
};

int cmd_train_upsampler(const CommandContext& ctx);
int cmd_distill(const CommandContext& ctx);
int cmd_segment(const CommandContext& ctx);
int cmd_eval(const CommandContext& ctx);
int cmd_gradcheck(const CommandContext& ctx);
int cmd_gen_toy_data(const CommandContext& ctx);

// Encoder from paths.encoder (plain or `student.`-prefixed names) or seeded synthesis.
EncoderWeights load_encoder(const CommandContext& ctx, const EncoderConfig& cfg);

}  // namespace ovseg
