#include "hqdet/scene.hpp"

namespace hqdet {

bool operator==(const CameraParams& a, const CameraParams& b) {
    return a.intrinsic == b.intrinsic && a.extrinsic == b.extrinsic && a.width == b.width && a.height == b.height;
}

bool operator==(const Scene& a, const Scene& b) {
    return a.scene_id == b.scene_id && a.ego_delta == b.ego_delta && a.rig == b.rig && a.objects == b.objects &&
           a.labels == b.labels;
}

}  // namespace hqdet
