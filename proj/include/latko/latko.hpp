#pragma once

// Everything: data, copula, measurement, latent regression, knockoffs, study.

#include "latko/simstudy.hpp"
