#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace uniprompt {

/// Runs one command. Returns 0 on success, 1 on invalid input, 2 when a computation aborts.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, char** argv);

/// A bundle directory given directly, or a name under $UNIPROMPT_DATA_DIR.
std::filesystem::path resolve_dataset(const std::string& name);

}  // namespace uniprompt
