#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dnbp::evalreport {

// Entry point of the `dnbp` tool. `args` excludes the program name.
// Returns 0 on success, 2 on usage errors, 1 on any other failure; failures
// print a single "error: ..." line to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dnbp::evalreport
