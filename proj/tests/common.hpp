#pragma once

#include <gtest/gtest.h>

#include "support/fixtures.hpp"
