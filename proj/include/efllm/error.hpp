#pragma once

#include <stdexcept>
#include <string>

namespace efllm {

// Base class for every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class IndexError : public Error { using Error::Error; };
class ContractError : public Error { using Error::Error; };
class RangeError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class LengthError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };
class SchemaError : public Error { using Error::Error; };

// Training produced a non-finite loss.
class DivergenceError : public Error { using Error::Error; };

// A function trigger matched but a required argument could not be filled.
class ArgumentError : public Error { using Error::Error; };

// One-way ANOVA with zero within-group variance (F undefined).
class ZeroVarianceError : public Error { using Error::Error; };

// Too many repeated inferences failed to parse.
class UnstableModelError : public Error { using Error::Error; };

}  // namespace efllm
