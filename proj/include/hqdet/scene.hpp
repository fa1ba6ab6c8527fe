#pragma once

// Ground-truth scene and detection records shared by the model, the metrics
// and the harness.

#include "hqdet/allocation.hpp"
#include "hqdet/geometry.hpp"

#include <string>
#include <vector>

namespace hqdet {

struct ClassSpec {
    std::string name;
    double l = 1, w = 1, h = 1;  // median size in meters
};

/// Classes produced by the synthetic generator, index = class id.
inline const std::vector<ClassSpec>& default_classes() {
    static const std::vector<ClassSpec> classes{{"car", 4.5, 1.9, 1.6}, {"truck", 8.0, 2.6, 3.2}};
    return classes;
}

struct SceneObject {
    int id = 0;
    int class_id = 0;
    Anchor3D box;

    bool operator==(const SceneObject&) const = default;
};

/// Derived per-camera label: clipped rectangle of the object's projection.
struct Label2D {
    std::size_t camera = 0;
    int object_id = 0;
    Box2D box;  // box.class_id carries the class
    bool truncated = false;
    double alpha = 0.0;
};

inline bool operator==(const Box2D& a, const Box2D& b) {
    return a.cx == b.cx && a.cy == b.cy && a.w == b.w && a.h == b.h && a.class_id == b.class_id && a.score == b.score;
}
inline bool operator==(const Label2D& a, const Label2D& b) {
    return a.camera == b.camera && a.object_id == b.object_id && a.box == b.box && a.truncated == b.truncated &&
           a.alpha == b.alpha;
}

/// Ego motion since the previous frame, expressed in the previous ego frame.
struct EgoDelta {
    double dx = 0, dy = 0, dyaw = 0;
    bool operator==(const EgoDelta&) const = default;
};

struct Scene {
    std::string scene_id;
    EgoDelta ego_delta;
    CameraRig rig;
    std::vector<SceneObject> objects;
    std::vector<Label2D> labels;
};

bool operator==(const CameraParams& a, const CameraParams& b);
bool operator==(const Scene& a, const Scene& b);

struct Detection3D {
    int id = 0;
    Anchor3D box;
    int class_id = 0;
    double score = 0;
};

struct Detection2D {
    int id = 0;
    std::size_t camera = 0;
    Box2D box;  // class_id and score included
    /// Id of the 3D detection this 2D box belongs to, or -1.
    int linked_3d_id = -1;
};

struct SceneDetections {
    std::string scene_id;
    std::vector<Detection3D> det3d;
    std::vector<Detection2D> det2d;
};

}  // namespace hqdet
