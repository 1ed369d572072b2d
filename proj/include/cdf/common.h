// Copyright (c) 2026 The cdf-speech Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef CDF_COMMON_H_
#define CDF_COMMON_H_

#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace cdf {

// Internal failure (broken invariant, I/O corruption). CLI maps this to
// exit code 1.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Caller/config mistake (bad option, missing prerequisite, malformed
// config). CLI maps this to exit code 2.
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

std::string strprintf(const char* fmt, ...) __attribute__((format(printf, 1, 2)));

enum class LogLevel : int { kError = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

// Level comes from the CDF_LOG environment variable (error|warn|info|debug),
// default info. Messages go to stderr.
LogLevel log_level();
void log_msg(LogLevel level, const std::string& msg);

inline void log_error(const std::string& msg) { log_msg(LogLevel::kError, msg); }
inline void log_warn(const std::string& msg) { log_msg(LogLevel::kWarn, msg); }
inline void log_info(const std::string& msg) { log_msg(LogLevel::kInfo, msg); }
inline void log_debug(const std::string& msg) { log_msg(LogLevel::kDebug, msg); }

#define CDF_CHECK(cond, msg)                                              \
  do {                                                                    \
    if (!(cond)) throw ::cdf::Error(std::string("check failed: ") + msg); \
  } while (0)

}  // namespace cdf

#endif  // CDF_COMMON_H_
