#include "jreg/logging.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <string>

#include "jreg/errors.hpp"

namespace jreg {

void set_log_level(std::string_view level) {
  if (level == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (level == "info") {
    spdlog::set_level(spdlog::level::info);
  } else if (level == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    throw ContractError("unknown log level \"" + std::string(level) + "\" (expected error, info, debug)");
  }
}

void init_logging() {
  static const bool installed = [] {
    auto logger = spdlog::stderr_color_mt("jreg");
    logger->set_pattern("[%H:%M:%S] [%^%l%$] %v");
    spdlog::set_default_logger(logger);
    return true;
  }();
  (void)installed;
  const char* env = std::getenv("JREG_LOG_LEVEL");
  set_log_level(env && *env ? env : "info");
}

}  // namespace jreg
