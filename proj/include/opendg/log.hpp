#pragma once

#include <string>

namespace opendg {

void log_info(const std::string& msg);
void log_warn(const std::string& msg);

}  // namespace opendg
