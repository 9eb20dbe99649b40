#pragma once

#include <stdexcept>
#include <string>

namespace crosspoint {

// Base of every error the library raises. The CLI maps ConfigError to exit
// code 2 and everything else derived from Error to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define CROSSPOINT_DEFINE_ERROR(Name)      \
  class Name : public Error {              \
   public:                                 \
    explicit Name(const std::string& what) \
        : Error(#Name ": " + what) {}      \
  };

CROSSPOINT_DEFINE_ERROR(ShapeError)
CROSSPOINT_DEFINE_ERROR(DomainError)
CROSSPOINT_DEFINE_ERROR(GraphError)
CROSSPOINT_DEFINE_ERROR(ConfigError)
CROSSPOINT_DEFINE_ERROR(DegenerateInput)
CROSSPOINT_DEFINE_ERROR(DegenerateCamera)
CROSSPOINT_DEFINE_ERROR(IoError)
CROSSPOINT_DEFINE_ERROR(CorruptCheckpoint)
CROSSPOINT_DEFINE_ERROR(VersionError)
CROSSPOINT_DEFINE_ERROR(NonFiniteLoss)
CROSSPOINT_DEFINE_ERROR(ArchMismatch)
CROSSPOINT_DEFINE_ERROR(DegenerateSplit)
CROSSPOINT_DEFINE_ERROR(InsufficientSamples)

#undef CROSSPOINT_DEFINE_ERROR

}  // namespace crosspoint
