"""Plain SGD with optional momentum."""


def sgd_step(params, grads, lr, momentum=0.0, velocity=None, weight_decay=0.0):
    """One SGD update; returns ``(new_params, new_velocity)``.

    Inputs are not mutated. Parameters missing from ``grads`` are left as is.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    velocity = velocity or {}
    new_params, new_vel = {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p
            if name in velocity:
                new_vel[name] = velocity[name]
            continue
        if weight_decay:
            g = g + weight_decay * p
        if momentum:
            v = momentum * velocity.get(name, 0.0) + g
            new_vel[name] = v
            g = v
        new_params[name] = p - lr * g
    return new_params, new_vel
