#pragma once

#include <stdexcept>
#include <string>

namespace editshield {

enum class ErrorKind {
    invalid_input,
    attack_diverged,
    training_failure,
    load_error,
    provider_unavailable,
    invalid_response,
    caption_unavailable,
    unknown_method,
    editor_failure,
    metric_unavailable,
    segmentation_unavailable,
    undefined_similarity,
    backend_unavailable,
    io_error,
};

inline const char* to_string(ErrorKind k) {
    switch (k) {
        case ErrorKind::invalid_input: return "invalid_input";
        case ErrorKind::attack_diverged: return "attack_diverged";
        case ErrorKind::training_failure: return "training_failure";
        case ErrorKind::load_error: return "load_error";
        case ErrorKind::provider_unavailable: return "provider_unavailable";
        case ErrorKind::invalid_response: return "invalid_response";
        case ErrorKind::caption_unavailable: return "caption_unavailable";
        case ErrorKind::unknown_method: return "unknown_method";
        case ErrorKind::editor_failure: return "editor_failure";
        case ErrorKind::metric_unavailable: return "metric_unavailable";
        case ErrorKind::segmentation_unavailable: return "segmentation_unavailable";
        case ErrorKind::undefined_similarity: return "undefined_similarity";
        case ErrorKind::backend_unavailable: return "backend_unavailable";
        case ErrorKind::io_error: return "io_error";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void raise(ErrorKind kind, const std::string& what) {
    throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
    if (!cond) raise(kind, what);
}

}  // namespace editshield
