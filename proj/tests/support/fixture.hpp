#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "cfsim/config.hpp"
#include "cfsim/pipeline.hpp"
#include "cfsim/prompts.hpp"
#include "mock_backend.hpp"

namespace cfsim::testing {

std::filesystem::path fixture_dir();
std::filesystem::path templates_dir();
std::shared_ptr<const TemplateCatalog> shipped_templates();

class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// Gateway over `backend`; answered requests go to the run transcript and
// to `extra_sinks`.
GatewayFactory mock_factory(std::shared_ptr<MockBackend> backend,
                            TransportMode mode = TransportMode::live,
                            std::vector<std::filesystem::path> extra_sinks = {});

// Live config for the mock backend.
RunConfig mock_config(TaskKind task, int k = 3, int num_inputs = 4);

std::vector<InputItem> fixture_inputs(TaskKind task);

std::string read_text(const std::filesystem::path& p);

}  // namespace cfsim::testing
