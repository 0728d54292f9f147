#pragma once

#include <stdexcept>
#include <string>

namespace dg {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define DG_ERROR_TYPE(Name)                      \
    class Name : public Error {                  \
    public:                                      \
        using Error::Error;                      \
    }

DG_ERROR_TYPE(ShapeMismatch);
DG_ERROR_TYPE(EmptyReduction);
DG_ERROR_TYPE(NonScalarRoot);
DG_ERROR_TYPE(InvalidConfig);
DG_ERROR_TYPE(NonFiniteScores);
DG_ERROR_TYPE(NonFiniteLoss);
DG_ERROR_TYPE(NonPositiveGamma);
DG_ERROR_TYPE(NoPositives);
DG_ERROR_TYPE(MissingRegime);
DG_ERROR_TYPE(InsufficientSamples);
DG_ERROR_TYPE(PlacementFailure);
DG_ERROR_TYPE(OutOfBounds);
DG_ERROR_TYPE(CorruptFile);
DG_ERROR_TYPE(InvariantViolation);
DG_ERROR_TYPE(EmptyWindow);

#undef DG_ERROR_TYPE

} // namespace dg
