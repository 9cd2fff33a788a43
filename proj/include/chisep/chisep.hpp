#pragma once

#include "chisep/error.hpp"
#include "chisep/volume.hpp"
#include "chisep/series.hpp"
#include "chisep/nifti.hpp"
#include "chisep/fft.hpp"
#include "chisep/dipole.hpp"
#include "chisep/phantom.hpp"
#include "chisep/relaxometry.hpp"
#include "chisep/fieldproc.hpp"
#include "chisep/inversion.hpp"
#include "chisep/losses.hpp"
#include "chisep/net.hpp"
#include "chisep/metrics.hpp"
