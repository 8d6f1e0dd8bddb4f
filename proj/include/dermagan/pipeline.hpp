#pragma once

// End-to-end orchestration: dataset -> gan -> factorize -> invert -> curate
// -> augment -> classify, with every product registered in an artifact store.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dermagan/store.hpp"

namespace dermagan {

/// Stage names in execution order.
const std::vector<std::string>& pipeline_stages();

struct PipelineOptions {
  bool resume = false;
  std::optional<int> auto_curate;        // overrides curate.auto_curate from the config
  std::optional<std::string> stop_after;  // halt after this stage (resumable)
  std::function<void(const std::string&)> log;
};

struct PipelineResult {
  std::filesystem::path workdir;
  std::vector<std::string> executed;  // stages run by this call
  std::vector<std::string> skipped;   // stages already complete in the store
  bool awaiting_curation = false;
  bool finished = false;
};

/// Runs the pipeline described by a JSON config. Relative paths in the config
/// resolve against `base_dir`. A stage counts as complete once its artifacts
/// are registered, so a rerun with `resume` picks up after the last complete
/// stage. Without `resume` an existing non-empty store is an error.
PipelineResult run_pipeline(const nlohmann::json& config, const std::filesystem::path& base_dir,
                            const PipelineOptions& options);
PipelineResult run_pipeline(const std::filesystem::path& config_file, const PipelineOptions& options);

}  // namespace dermagan
