#pragma once

#include <string>
#include <vector>

namespace lidog {

// Entry point shared by the binary and the tests. Returns the process exit
// code; never throws.
int cli_main(const std::vector<std::string>& args);
int cli_main(int argc, char** argv);

// Full --help text (used by the doc-coverage test).
std::string cli_help_text();

// Every recognized config-file key with a one-line description. Parsing
// rejects keys outside this registry, and --help lists all of them.
struct ConfigKeyDoc {
  std::string key;
  std::string doc;
};
const std::vector<ConfigKeyDoc>& config_key_docs();

}  // namespace lidog
