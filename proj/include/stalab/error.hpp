#pragma once

#include <stdexcept>
#include <string>

namespace stalab {

/// Base class for every error raised by the library. `error_class()` is the
/// machine-readable name the CLI prints on failure.
class Error : public std::runtime_error {
public:
    Error(std::string error_class, const std::string& message)
        : std::runtime_error(message), m_class(std::move(error_class)) {}

    const std::string& error_class() const noexcept { return m_class; }

private:
    std::string m_class;
};

#define STALAB_DEFINE_ERROR(Name)                                            \
    class Name : public Error {                                              \
    public:                                                                  \
        explicit Name(const std::string& message) : Error(#Name, message) {} \
    }

STALAB_DEFINE_ERROR(InvalidFraction);
STALAB_DEFINE_ERROR(InvalidArgument);
STALAB_DEFINE_ERROR(InvalidConfig);
STALAB_DEFINE_ERROR(SequenceTooLong);
STALAB_DEFINE_ERROR(ShapeMismatch);
STALAB_DEFINE_ERROR(NoSoftSlots);
STALAB_DEFINE_ERROR(Divergence);
STALAB_DEFINE_ERROR(MemorizationGateFailed);
STALAB_DEFINE_ERROR(UnknownMethod);
STALAB_DEFINE_ERROR(MissingReference);
STALAB_DEFINE_ERROR(KTooLarge);
STALAB_DEFINE_ERROR(UnknownRecord);
STALAB_DEFINE_ERROR(IncompatibleModels);
STALAB_DEFINE_ERROR(InsufficientData);
STALAB_DEFINE_ERROR(DegenerateLabels);
STALAB_DEFINE_ERROR(MissingArtifact);
STALAB_DEFINE_ERROR(ConfigMismatch);
STALAB_DEFINE_ERROR(CorruptArtifact);
STALAB_DEFINE_ERROR(IoError);

#undef STALAB_DEFINE_ERROR

/// Raised by `encode` for characters outside the vocabulary.
class UnencodableCharacter : public Error {
public:
    explicit UnencodableCharacter(std::size_t position)
        : Error("UnencodableCharacter",
                "unencodable character at index " + std::to_string(position)),
          m_position(position) {}

    std::size_t position() const noexcept { return m_position; }

private:
    std::size_t m_position;
};

} // namespace stalab
