#pragma once

#include <string_view>

namespace jreg {

// Routes log output to stderr at the level named by JREG_LOG_LEVEL
// (error, info, debug; default info).
void init_logging();
void set_log_level(std::string_view level);

}  // namespace jreg
