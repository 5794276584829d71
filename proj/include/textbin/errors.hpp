#pragma once

#include <stdexcept>
#include <string>

namespace textbin {

// Every failure raised by the library derives from Error so callers can map
// categories onto exit codes without string matching.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionError : Error { using Error::Error; };
struct DomainError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };
struct CapacityError : Error { using Error::Error; };
struct EncodingError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct TrainingError : Error { using Error::Error; };
struct UnsupportedMetric : Error { using Error::Error; };

}  // namespace textbin
