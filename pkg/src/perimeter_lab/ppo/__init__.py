"""Policy-gradient perimeter control: state builders, actor-critic, trainer, evaluation."""
