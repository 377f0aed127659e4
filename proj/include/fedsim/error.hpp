// Copyright (c) 2026 fedsim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace fedsim {

/// Base class for every error raised by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Shape or extent mismatch between operands.
struct DimensionError : Error {
    using Error::Error;
};

/// A value lies outside its documented range (labels, rates, extents).
struct ValueError : Error {
    using Error::Error;
};

/// A non-finite value appeared where a finite one is required.
struct NumericError : Error {
    using Error::Error;
};

/// Malformed file content. Messages include the line number when known.
struct ParseError : Error {
    using Error::Error;
};

/// The filesystem refused an open, read, or write.
struct IoError : Error {
    using Error::Error;
};

/// File content disagrees with the manifest or another declared schema.
struct SchemaError : Error {
    using Error::Error;
};

/// Invalid or contradictory configuration.
struct ConfigError : Error {
    using Error::Error;
};

/// Caller violated an API precondition.
struct ContractError : Error {
    using Error::Error;
};

/// No eligible client survived selection or aggregation.
struct EmptyCohortError : Error {
    using Error::Error;
};

/// Partition or fold constraints could not be met.
struct InfeasiblePartitionError : Error {
    using Error::Error;
};

/// Attention pooling was asked to reduce a fully masked row set.
struct DegenerateAttentionError : Error {
    using Error::Error;
};

/// Local training produced a non-finite loss.
struct ClientDivergenceError : NumericError {
    using NumericError::NumericError;
};

} // namespace fedsim
