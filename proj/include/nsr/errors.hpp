#pragma once

#include <stdexcept>
#include <string>

namespace nsr {

/// Root of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  /// Short machine-parsable category, e.g. "dimension".
  virtual const char* kind() const noexcept { return "error"; }
};

#define NSR_DEFINE_ERROR(Name, Base, Kind)                          \
  class Name : public Base {                                        \
   public:                                                          \
    explicit Name(const std::string& what) : Base(what) {}          \
    const char* kind() const noexcept override { return Kind; }     \
  };

NSR_DEFINE_ERROR(DimensionError, Error, "dimension")
NSR_DEFINE_ERROR(ArgumentError, Error, "argument")
NSR_DEFINE_ERROR(InputError, Error, "input")
NSR_DEFINE_ERROR(StateError, Error, "state")
NSR_DEFINE_ERROR(ContractError, Error, "contract")
NSR_DEFINE_ERROR(IngestionError, Error, "ingestion")
NSR_DEFINE_ERROR(TrainingError, Error, "training")
NSR_DEFINE_ERROR(IoError, Error, "io")

NSR_DEFINE_ERROR(PersistenceError, Error, "persistence")
NSR_DEFINE_ERROR(VersionError, PersistenceError, "version")
NSR_DEFINE_ERROR(ChecksumError, PersistenceError, "checksum")
NSR_DEFINE_ERROR(FormatError, PersistenceError, "format")

#undef NSR_DEFINE_ERROR

}  // namespace nsr
