#pragma once

#include <stdexcept>
#include <string>

namespace viewsynth {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define VIEWSYNTH_DEFINE_ERROR(Name)            \
  class Name : public Error {                   \
   public:                                      \
    using Error::Error;                         \
  }

VIEWSYNTH_DEFINE_ERROR(ShapeError);
VIEWSYNTH_DEFINE_ERROR(InvalidDepthError);
VIEWSYNTH_DEFINE_ERROR(BehindCameraError);
VIEWSYNTH_DEFINE_ERROR(InvalidCameraError);
VIEWSYNTH_DEFINE_ERROR(InputTooSmallError);
VIEWSYNTH_DEFINE_ERROR(NoNegativeError);
VIEWSYNTH_DEFINE_ERROR(ConfigError);
VIEWSYNTH_DEFINE_ERROR(InsufficientPointsError);
VIEWSYNTH_DEFINE_ERROR(DegenerateConfigurationError);
VIEWSYNTH_DEFINE_ERROR(LocalizationFailure);
VIEWSYNTH_DEFINE_ERROR(EmptyRepositoryError);
VIEWSYNTH_DEFINE_ERROR(EvaluationError);
VIEWSYNTH_DEFINE_ERROR(IngestionError);
VIEWSYNTH_DEFINE_ERROR(EmptySequenceError);
VIEWSYNTH_DEFINE_ERROR(FormatError);
VIEWSYNTH_DEFINE_ERROR(TrainingAborted);

#undef VIEWSYNTH_DEFINE_ERROR

}  // namespace viewsynth
