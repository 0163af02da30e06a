#pragma once

namespace flowscan {
namespace cli {

// Full command dispatch: `flowscan train|eval|sample|verify --config PATH
// [--section.key value]...`. Returns the process exit code: 0 success,
// 1 usage or configuration error, 2 data error, 3 numeric abort, 4 failed
// verification.
int run(int argc, const char* const* argv);

}  // namespace cli
}  // namespace flowscan
