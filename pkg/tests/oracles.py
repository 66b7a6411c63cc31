"""Plain-loop reference implementations. Deliberately independent of the package code paths."""

import math


def distances(joints_2d, parent):
    out = []
    for i in range(len(parent)):
        dx = joints_2d[i][0] - joints_2d[parent[i]][0]
        dy = joints_2d[i][1] - joints_2d[parent[i]][1]
        out.append(math.sqrt(dx * dx + dy * dy))
    return out


def bones(pose, parent):
    return [[pose[parent[i]][c] - pose[i][c] for c in range(3)] for i in range(len(parent))]


def l3d(pred, gt):
    total, count = 0.0, 0
    for b in range(len(pred)):
        for j in range(len(pred[b])):
            for c in range(3):
                total += (pred[b][j][c] - gt[b][j][c]) ** 2
                count += 1
    return total / count


def lerror(err, pred, gt):
    total, count = 0.0, 0
    for b in range(len(pred)):
        for j in range(len(pred[b])):
            for c in range(3):
                target = abs(gt[b][j][c] - pred[b][j][c])
                total += (err[b][j][c] - target) ** 2
                count += 1
    return total / count


def _normal(p0, p1, p2):
    u = [p1[c] - p0[c] for c in range(3)]
    v = [p2[c] - p1[c] for c in range(3)]
    n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]]
    length = math.sqrt(sum(x * x for x in n))
    if length < 1e-9:
        return [0.0, 0.0, 0.0]
    return [x / length for x in n]


def lnormal(pred, gt, triangles):
    total = 0.0
    for b in range(len(pred)):
        per_sample = 0.0
        for a, m, c in triangles:
            ng = _normal(gt[b][a], gt[b][m], gt[b][c])
            npred = _normal(pred[b][a], pred[b][m], pred[b][c])
            per_sample += sum(abs(ng[k] - npred[k]) for k in range(3))
        total += per_sample / len(triangles)
    return total / len(pred)


def lbone(pred, gt, parent):
    total = 0.0
    for b in range(len(pred)):
        bg, bp = bones(gt[b], parent), bones(pred[b], parent)
        per_sample = 0.0
        for i in range(len(parent)):
            per_sample += sum(abs(bg[i][c] - bp[i][c]) for c in range(3))
        total += per_sample / len(parent)
    return total / len(pred)


def mpjpe(pred, gt, joints, center_fn):
    """center_fn(pose, joint) -> 3-vector subtracted from that joint."""
    total, count = 0.0, 0
    for s in range(len(pred)):
        for j in joints:
            cp = center_fn(pred[s], j)
            cg = center_fn(gt[s], j)
            d = 0.0
            for c in range(3):
                d += ((pred[s][j][c] - cp[c]) - (gt[s][j][c] - cg[c])) ** 2
            total += math.sqrt(d)
            count += 1
    return total / count


def six_metrics(pred, gt, topo):
    lh, rh = topo.left_hip, topo.right_hip
    nose = 23 + 30  # nose tip of the 68-point face block

    def pelvis(pose, j):
        return [(pose[lh][c] + pose[rh][c]) / 2 for c in range(3)]

    def nose_c(pose, j):
        return pose[nose]

    def wrist(pose, j):
        return pose[91] if j < 112 else pose[112]

    body, face, hands = range(0, 23), range(23, 91), range(91, 133)
    return {
        "mpjpe_all": mpjpe(pred, gt, range(133), pelvis),
        "mpjpe_body": mpjpe(pred, gt, body, pelvis),
        "mpjpe_face": mpjpe(pred, gt, face, pelvis),
        "mpjpe_face_aligned": mpjpe(pred, gt, face, nose_c),
        "mpjpe_hands": mpjpe(pred, gt, hands, pelvis),
        "mpjpe_hands_aligned": mpjpe(pred, gt, hands, wrist),
    }


def project(point, focal, center, translation):
    x, y, z = (point[c] + translation[c] for c in range(3))
    return [focal[0] * x / z + center[0], focal[1] * y / z + center[1]]
