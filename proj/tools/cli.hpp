#pragma once

namespace pssl::cli {

// Exit codes: 0 ok, 1 unexpected, 2 config, 3 numeric, 4 data or io.
int run(int argc, char** argv);

}  // namespace pssl::cli
