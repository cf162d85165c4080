#pragma once

namespace xmd {

// Entry point for the xmd tool. Returns the process exit status:
//   0 success
//   1 usage / configuration / contract errors
//   2 data errors (files, shapes, missing targets)
//   3 numeric errors (non-finite values, singular systems)
int run_cli(int argc, const char* const* argv);

}  // namespace xmd
