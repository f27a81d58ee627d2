#pragma once

#include <stdexcept>
#include <string>

namespace plmix {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define PLMIX_DECLARE_ERROR(Name)          \
  class Name : public Error {              \
   public:                                 \
    using Error::Error;                    \
  }

PLMIX_DECLARE_ERROR(DimensionError);
PLMIX_DECLARE_ERROR(ArgumentError);
PLMIX_DECLARE_ERROR(NumericError);
PLMIX_DECLARE_ERROR(GenerationError);
PLMIX_DECLARE_ERROR(SplitError);
PLMIX_DECLARE_ERROR(VocabularyError);
PLMIX_DECLARE_ERROR(AlignmentError);
PLMIX_DECLARE_ERROR(DurationError);
PLMIX_DECLARE_ERROR(InputError);
PLMIX_DECLARE_ERROR(TrainingError);
PLMIX_DECLARE_ERROR(CalibrationError);
PLMIX_DECLARE_ERROR(CoverageError);
PLMIX_DECLARE_ERROR(MetricError);
PLMIX_DECLARE_ERROR(ConfigError);
PLMIX_DECLARE_ERROR(FormatError);

#undef PLMIX_DECLARE_ERROR

}  // namespace plmix
