#pragma once

#include <stdexcept>
#include <string>

namespace permfree {

// Error categories map to process exit codes in the CLI:
// usage = 1, config = 2, data = 3, numeric = 4.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace permfree
