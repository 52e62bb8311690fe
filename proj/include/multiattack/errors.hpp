#pragma once

#include <stdexcept>

namespace multiattack {

// Base class for everything the library throws.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};
struct IndexError : Error {
    using Error::Error;
};
// API misuse: calling backward on a non-scalar, mismatched optimizer state, ...
struct ContractError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct DataError : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct FileError : Error {
    using Error::Error;
};

}  // namespace multiattack
