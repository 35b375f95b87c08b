import biot.models
from django.db import migrations, models
import django.db.models.deletion


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('out_dir', models.CharField(max_length=512)),
                ('config_hash', models.CharField(max_length=64, validators=[biot.models.validate_digest])),
                ('seed', models.CharField(max_length=20, validators=[biot.models.validate_seed])),
                ('command', models.CharField(max_length=16)),
                ('status', models.CharField(choices=[('Running', 'Running'), ('Completed', 'Completed'), ('Failed', 'Failed')], default='Running', max_length=12)),
                ('stage', models.CharField(blank=True, max_length=32)),
                ('created', models.DateTimeField(auto_now_add=True)),
                ('summary', models.JSONField(blank=True, default=dict)),
            ],
        ),
        migrations.CreateModel(
            name='DatasetRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('source', models.CharField(choices=[('Simulated', 'Simulated'), ('File', 'File')], max_length=12)),
                ('sha256', models.CharField(max_length=64, validators=[biot.models.validate_digest])),
                ('records', models.PositiveIntegerField()),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, to='biot.experimentrun')),
            ],
        ),
    ]
