# Generated by Django 5.1.6 on 2026-10-18 09:12

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name="ExperimentRun",
            fields=[
                (
                    "id",
                    models.BigAutoField(
                        auto_created=True,
                        primary_key=True,
                        serialize=False,
                        verbose_name="ID",
                    ),
                ),
                (
                    "command",
                    models.CharField(
                        choices=[
                            ("gen_data", "Generate data"),
                            ("pretrain_codec", "Pretrain codec"),
                            ("train", "Train"),
                            ("sample", "Sample"),
                            ("eval", "Evaluate"),
                        ],
                        max_length=20,
                    ),
                ),
                (
                    "status",
                    models.CharField(
                        choices=[
                            ("running", "Running"),
                            ("completed", "Completed"),
                            ("failed", "Failed"),
                        ],
                        default="running",
                        max_length=20,
                    ),
                ),
                ("config_hash", models.CharField(blank=True, max_length=64)),
                ("seed", models.BigIntegerField(blank=True, null=True)),
                ("input_hashes", models.JSONField(blank=True, default=dict)),
                ("artifact_path", models.CharField(blank=True, max_length=500)),
                ("summary", models.JSONField(blank=True, default=dict)),
                ("error", models.TextField(blank=True)),
                ("created_at", models.DateTimeField(auto_now_add=True)),
                ("finished_at", models.DateTimeField(blank=True, null=True)),
            ],
            options={
                "ordering": ["-created_at"],
            },
        ),
    ]
