from django.db import models
from django.utils import timezone


class ExperimentRun(models.Model):
    """One management-command invocation and the artifacts it produced."""
    STATUS_CHOICES = [
        ('running', 'Running'),
        ('completed', 'Completed'),
        ('failed', 'Failed'),
    ]

    COMMAND_CHOICES = [
        ('gen_data', 'Generate data'),
        ('pretrain_codec', 'Pretrain codec'),
        ('train', 'Train'),
        ('sample', 'Sample'),
        ('eval', 'Evaluate'),
    ]

    command = models.CharField(max_length=20, choices=COMMAND_CHOICES)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='running')
    config_hash = models.CharField(max_length=64, blank=True)
    seed = models.BigIntegerField(null=True, blank=True)
    input_hashes = models.JSONField(default=dict, blank=True)
    artifact_path = models.CharField(max_length=500, blank=True)
    summary = models.JSONField(default=dict, blank=True)
    error = models.TextField(blank=True)

    created_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.command} #{self.pk} ({self.status})"

    def mark_completed(self, artifact_path='', summary=None, input_hashes=None):
        self.status = 'completed'
        self.artifact_path = str(artifact_path)
        self.summary = summary or {}
        if input_hashes:
            self.input_hashes = input_hashes
        self.finished_at = timezone.now()
        self.save(update_fields=['status', 'artifact_path', 'summary', 'input_hashes', 'finished_at'])

    def mark_failed(self, error):
        self.status = 'failed'
        self.error = str(error)
        self.finished_at = timezone.now()
        self.save(update_fields=['status', 'error', 'finished_at'])
