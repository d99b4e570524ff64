#pragma once

#include <stdexcept>
#include <string>

namespace abound {

// Root of every error raised by the library. Subclasses name the failure
// category so callers (and the CLI) can map them to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define ABOUND_DEFINE_ERROR(Name)                        \
  class Name : public Error {                            \
   public:                                               \
    explicit Name(const std::string& what) : Error(#Name ": " + what) {} \
  }

ABOUND_DEFINE_ERROR(DegenerateInput);
ABOUND_DEFINE_ERROR(InvalidParameter);
ABOUND_DEFINE_ERROR(EvaluationError);
ABOUND_DEFINE_ERROR(GenerationError);
ABOUND_DEFINE_ERROR(InvalidDonor);
ABOUND_DEFINE_ERROR(FormatError);
ABOUND_DEFINE_ERROR(VersionError);
ABOUND_DEFINE_ERROR(UnknownClass);
ABOUND_DEFINE_ERROR(PromptTooLong);
ABOUND_DEFINE_ERROR(DegenerateAnchors);
ABOUND_DEFINE_ERROR(InvalidBatch);
ABOUND_DEFINE_ERROR(EmptyDataset);
ABOUND_DEFINE_ERROR(MissingBank);
ABOUND_DEFINE_ERROR(UndefinedMetric);
ABOUND_DEFINE_ERROR(ConfigError);
ABOUND_DEFINE_ERROR(FileNotFound);

#undef ABOUND_DEFINE_ERROR

}  // namespace abound
