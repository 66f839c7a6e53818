#pragma once

#include <stdexcept>
#include <string>

namespace ster {

// Every failure surfaced by the toolkit derives from Error. The CLI maps the
// category to an exit code (see harness.hpp).
enum class ErrorCategory { kGeneral, kValidation, kDependency, kGateway };

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what,
                 ErrorCategory category = ErrorCategory::kGeneral)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

#define STER_DEFINE_ERROR(Name, Category)                               \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& what)                             \
        : Error(std::string(#Name ": ") + what, ErrorCategory::Category) {} \
  };

// dataset_core
STER_DEFINE_ERROR(ParseError, kValidation)
STER_DEFINE_ERROR(ValidationError, kValidation)
STER_DEFINE_ERROR(UnsupportedLayout, kValidation)

// frame_select
STER_DEFINE_ERROR(MissingPhase, kValidation)
STER_DEFINE_ERROR(EmptyPhase, kValidation)

// visual_prompt
STER_DEFINE_ERROR(DecodeError, kValidation)
STER_DEFINE_ERROR(MissingFrameFile, kValidation)

// prompt_forge
STER_DEFINE_ERROR(TemplateError, kValidation)

// llm_gateway
STER_DEFINE_ERROR(EndpointError, kGateway)
STER_DEFINE_ERROR(CacheMiss, kGateway)
STER_DEFINE_ERROR(AuthError, kGateway)

// decompose
STER_DEFINE_ERROR(MissingDecomposition, kValidation)

// metrics
STER_DEFINE_ERROR(EmptyCorpus, kValidation)

// harness
STER_DEFINE_ERROR(DependencyMissing, kDependency)
STER_DEFINE_ERROR(IncomparableRuns, kValidation)

#undef STER_DEFINE_ERROR

}  // namespace ster
