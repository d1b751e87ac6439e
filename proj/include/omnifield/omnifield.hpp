#pragma once

// Umbrella header. The HTTP layer (segserver_http.hpp) is separate because
// it pulls in the HTTP and JSON libraries.

#include "omnifield/camera.hpp"
#include "omnifield/config.hpp"
#include "omnifield/core.hpp"
#include "omnifield/dataset.hpp"
#include "omnifield/evalbench.hpp"
#include "omnifield/field.hpp"
#include "omnifield/field_io.hpp"
#include "omnifield/hier2d.hpp"
#include "omnifield/image_io.hpp"
#include "omnifield/losses.hpp"
#include "omnifield/pca.hpp"
#include "omnifield/segserver.hpp"
#include "omnifield/synthdata.hpp"
#include "omnifield/trainer.hpp"
#include "omnifield/volume.hpp"
