#pragma once

#include <stdexcept>
#include <string>

namespace hye {

// Base of every error thrown by the library. Each subclass maps to a failure
// class that callers (and the CLI exit codes) distinguish.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error { public: using Error::Error; };
class NumericError : public Error { public: using Error::Error; };
class UsageError : public Error { public: using Error::Error; };
class ConfigError : public Error { public: using Error::Error; };
class IndexError : public Error { public: using Error::Error; };
class DomainError : public Error { public: using Error::Error; };

// Data problems: bad files, empty datasets, unpaired inputs.
class DataError : public Error { public: using Error::Error; };
class FormatError : public DataError { public: using DataError::DataError; };
class BadMagicError : public FormatError { public: using FormatError::FormatError; };
class VersionError : public FormatError { public: using FormatError::FormatError; };
class ChecksumError : public FormatError { public: using FormatError::FormatError; };
class TruncatedError : public FormatError { public: using FormatError::FormatError; };
class DatasetError : public DataError { public: using DataError::DataError; };
class ConditionError : public DataError { public: using DataError::DataError; };
class PairingError : public DataError { public: using DataError::DataError; };
class EvaluationError : public DataError { public: using DataError::DataError; };

class TrainingError : public Error { public: using Error::Error; };

class IoError : public Error { public: using Error::Error; };

} // namespace hye
