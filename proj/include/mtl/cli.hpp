#pragma once

namespace mtl {

/// Command-line front end. Exit codes: 0 success, 1 runtime or data error,
/// 2 usage or configuration error.
int cli_main(int argc, const char* const* argv);

}  // namespace mtl
